#include "sbridge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "sbridge/errors.hpp"

namespace sbridge::io {
namespace {

using nlohmann::json;

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError("'" + path + "': " + e.what(), 1);
  }
}

}  // namespace

void write_f64(const std::string& path, std::span<const double> values) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    bits = to_le(bits);
    f.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

std::vector<double> read_f64(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open '" + path + "'");
  const auto size = static_cast<std::size_t>(f.tellg());
  if (size % 8 != 0) throw IoError("'" + path + "': size is not a multiple of 8 bytes");
  f.seekg(0);
  std::vector<double> out(size / 8);
  for (auto& v : out) {
    std::uint64_t bits;
    f.read(reinterpret_cast<char*>(&bits), sizeof bits);
    bits = to_le(bits);
    std::memcpy(&v, &bits, sizeof v);
  }
  if (!f) throw IoError("read from '" + path + "' failed");
  return out;
}

void save_policy(const csbi::PolicyNet& net, const CheckpointMeta& meta, const std::string& stem) {
  net.mlp.validate();
  const Eigen::VectorXd flat = net.mlp.flatten();
  write_f64(stem + ".bin", {flat.data(), static_cast<std::size_t>(flat.size())});
  const auto& e = net.embedding;
  const json j = {{"format", "sbridge-mlp-f64le"},
                  {"widths", net.mlp.widths},
                  {"n_params", flat.size()},
                  {"activation", "silu"},
                  {"K", net.K},
                  {"L", net.L},
                  {"conditional", net.conditional},
                  {"embedding",
                   {{"time_width", e.time_width},
                    {"feature_index_width", e.feature_index_width},
                    {"time_index_width", e.time_index_width},
                    {"min_frequency", e.min_frequency},
                    {"max_frequency", e.max_frequency}}},
                  {"step", meta.step},
                  {"seed", meta.seed}};
  std::ofstream f(stem + ".json");
  if (!f) throw IoError("cannot open '" + stem + ".json' for writing");
  f << j.dump(2) << '\n';
}

csbi::PolicyNet load_policy(const std::string& stem, CheckpointMeta* meta) {
  const json j = read_json(stem + ".json");
  csbi::PolicyNet net;
  try {
    net.K = j.at("K").get<int>();
    net.L = j.at("L").get<int>();
    net.conditional = j.at("conditional").get<bool>();
    const json& e = j.at("embedding");
    net.embedding.time_width = e.at("time_width").get<int>();
    net.embedding.feature_index_width = e.at("feature_index_width").get<int>();
    net.embedding.time_index_width = e.at("time_index_width").get<int>();
    net.embedding.min_frequency = e.at("min_frequency").get<double>();
    net.embedding.max_frequency = e.at("max_frequency").get<double>();
    net.mlp = nn::MlpParams::zeros(j.at("widths").get<std::vector<int>>());
    if (meta) {
      meta->step = j.at("step").get<long>();
      meta->seed = j.at("seed").get<std::uint64_t>();
    }
  } catch (const json::exception& ex) {
    throw ParseError("'" + stem + ".json': " + ex.what(), 1);
  }
  if (net.mlp.input_width() != net.input_width() || net.mlp.output_width() != net.dim()) {
    throw ValidationError("checkpoint '" + stem + "': widths do not match the input contract");
  }
  const std::vector<double> flat = read_f64(stem + ".bin");
  if (static_cast<Eigen::Index>(flat.size()) != net.mlp.parameter_count()) {
    throw IoError("checkpoint '" + stem + ".bin' holds " + std::to_string(flat.size()) + " values, expected " +
                  std::to_string(net.mlp.parameter_count()));
  }
  net.mlp.assign(Eigen::Map<const Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size())));
  net.mlp.validate();
  return net;
}

void save_pair(const csbi::PolicyPair& pair, std::uint64_t seed, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  save_policy(pair.forward, {pair.forward_opt.step, seed}, dir + "/forward");
  save_policy(pair.backward, {pair.backward_opt.step, seed}, dir + "/backward");
}

csbi::PolicyPair load_pair(const std::string& dir) {
  csbi::PolicyPair pair;
  CheckpointMeta fm, bm;
  pair.forward = load_policy(dir + "/forward", &fm);
  pair.backward = load_policy(dir + "/backward", &bm);
  pair.forward_opt.step = fm.step;
  pair.backward_opt.step = bm.step;
  return pair;
}

}  // namespace sbridge::io
