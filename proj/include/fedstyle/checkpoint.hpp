#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/memory.hpp"

namespace fedstyle {

// "encoder <layers> <activation>", then per layer "<d_out> <d_in>", the
// weight row-major on one line and the bias on the next. 17 significant digits.
inline std::string to_checkpoint_text(const EncoderParams& enc) {
  enc.validate();
  std::ostringstream os;
  os << std::setprecision(17);
  os << "encoder " << enc.layers.size() << ' ' << to_string(enc.activation) << '\n';
  for (const auto& l : enc.layers) {
    os << l.out_dim() << ' ' << l.in_dim() << '\n';
    for (std::size_t i = 0; i < l.weight.size(); ++i) os << (i ? " " : "") << l.weight[i];
    os << '\n';
    for (std::size_t i = 0; i < l.bias.size(); ++i) os << (i ? " " : "") << l.bias[i];
    os << '\n';
  }
  return os.str();
}

inline EncoderParams encoder_from_checkpoint_text(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string tag, act;
  std::size_t n = 0;
  if (!(is >> tag >> n >> act) || tag != "encoder") throw ConfigError("encoder checkpoint: bad header");
  EncoderParams enc;
  enc.activation = parse_activation(act);
  auto read_values = [&](Tensor& t) {
    for (double& v : t.values()) {
      std::string tok;
      if (!(is >> tok)) throw ConfigError("encoder checkpoint: truncated values");
      v = std::stod(tok);
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t d_out = 0, d_in = 0;
    if (!(is >> d_out >> d_in)) throw ConfigError("encoder checkpoint: bad layer header");
    DenseLayer l{Tensor::matrix(d_out, d_in), Tensor({d_out}, 0.0)};
    read_values(l.weight);
    read_values(l.bias);
    enc.layers.push_back(std::move(l));
  }
  enc.validate();
  return enc;
}

// Write-then-rename so a failed write never clobbers an existing file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

// Final encoder followed by one memory block per client.
inline std::string experiment_checkpoint_text(const EncoderParams& encoder,
                                              const std::vector<StyleMemory>& memories) {
  std::string out = to_checkpoint_text(encoder);
  out += "memories " + std::to_string(memories.size()) + '\n';
  for (const auto& m : memories) out += to_checkpoint_text(m);
  return out;
}

}  // namespace fedstyle
