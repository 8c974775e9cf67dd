#pragma once

// Checkpoint bundles: a directory holding model.json (architecture, ADM
// threshold, preprocessing flags, tensor index) and one tensor file per
// stored tensor. Quantized weights are written as int16 plus a scale.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "pipeline.hpp"
#include "tensor_file.hpp"

namespace corticospike::checkpoint {

inline constexpr const char *kManifestName = "model.json";
inline constexpr int kBundleVersion = 1;

struct BundleInfo {
  pipeline::ModelKind kind = pipeline::ModelKind::hybrid;
  pipeline::ArchConfig arch;
  std::vector<std::string> channels;
  int bits = 32;
  bool bandpass = true;
  bool notch = false;
  double notch_q = 30.0;
  double adm_threshold = 0.0; ///< hybrid only
};

namespace detail {

inline nlohmann::ordered_json arch_json(const pipeline::ArchConfig &a) {
  return {{"eeg_channels", a.eeg_channels},
          {"conv_out", a.conv_out},
          {"kernel", a.kernel},
          {"stride", a.stride},
          {"window_s", a.window_s}};
}

template <typename Model>
void write_bundle(const std::filesystem::path &dir, Model &model, const BundleInfo &info) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw DataError("cannot create checkpoint directory " + dir.string());
  nlohmann::ordered_json j;
  j["format"] = "corticospike-checkpoint";
  j["version"] = kBundleVersion;
  j["kind"] = pipeline::kind_name(info.kind);
  j["arch"] = arch_json(info.arch);
  j["channels"] = info.channels;
  j["bits"] = info.bits;
  j["preprocess"] = {{"bandpass", info.bandpass}, {"notch", info.notch},
                     {"notch_q", info.notch_q}};
  if (info.kind == pipeline::ModelKind::hybrid)
    j["adm_threshold"] = info.adm_threshold;
  j["tensors"] = nlohmann::ordered_json::array();
  pipeline::for_each_tensor(model, [&](const std::string &name, auto &v,
                                       const std::vector<std::uint32_t> &dims,
                                       bool is_weight) {
    const std::string file = name + ".aadt";
    nlohmann::ordered_json entry{{"name", name}, {"file", file}, {"dims", dims}};
    if (is_weight && info.bits < 32) {
      using R = typename std::decay_t<decltype(v)>::value_type;
      auto q = pipeline::quantize_tensor<R>(v, info.bits);
      entry["dtype"] = "i16";
      entry["scale"] = q.scale;
      io::write_tensor(dir / file, io::Tensor{dims, std::move(q.values)});
    } else {
      entry["dtype"] = "f32";
      io::write_tensor(dir / file,
                       io::Tensor{dims, std::vector<float>(v.begin(), v.end())});
    }
    j["tensors"].push_back(std::move(entry));
  });
  std::ofstream os(dir / kManifestName, std::ios::trunc);
  if (!os)
    throw DataError("cannot write " + (dir / kManifestName).string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_manifest_json(const std::filesystem::path &dir) {
  std::ifstream is(dir / kManifestName);
  if (!is)
    throw DataError("no " + std::string(kManifestName) + " in " + dir.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception &e) {
    throw FormatError("model.json", e.what());
  }
}

template <typename Model>
void read_tensors(const std::filesystem::path &dir, const nlohmann::json &j, Model &model) {
  std::map<std::string, nlohmann::json> index;
  for (const auto &t : j.at("tensors"))
    index[t.at("name").get<std::string>()] = t;
  pipeline::for_each_tensor(model, [&](const std::string &name, auto &v,
                                       const std::vector<std::uint32_t> &dims, bool) {
    const auto it = index.find(name);
    if (it == index.end())
      throw FormatError("tensors", "missing tensor " + name);
    const auto &e = it->second;
    const auto t = io::read_tensor(dir / e.at("file").get<std::string>());
    if (t.dims != dims)
      throw FormatError("dims", "tensor " + name + " has unexpected shape");
    using R = typename std::decay_t<decltype(v)>::value_type;
    if (const auto *f = std::get_if<std::vector<float>>(&t.values)) {
      v.assign(f->begin(), f->end());
    } else {
      pipeline::QuantizedTensor q;
      q.scale = e.at("scale").get<double>();
      q.values = t.i16();
      v = pipeline::dequantize<R>(q);
    }
  });
}

} // namespace detail

inline void save(const std::filesystem::path &dir, const pipeline::HybridModel<float> &model,
                 BundleInfo info) {
  info.kind = pipeline::ModelKind::hybrid;
  info.arch = model.arch;
  info.adm_threshold = model.adm.threshold;
  auto copy = model;
  detail::write_bundle(dir, copy, info);
}

inline void save(const std::filesystem::path &dir,
                 const pipeline::ReferenceCnn<float> &model, BundleInfo info) {
  info.kind = pipeline::ModelKind::reference;
  info.arch = model.arch;
  auto copy = model;
  detail::write_bundle(dir, copy, info);
}

inline BundleInfo read_info(const std::filesystem::path &dir) {
  const auto j = detail::read_manifest_json(dir);
  try {
    if (j.at("format").get<std::string>() != "corticospike-checkpoint")
      throw FormatError("format", "not a checkpoint bundle");
    if (j.at("version").get<int>() != kBundleVersion)
      throw FormatError("version", "unsupported checkpoint version");
    BundleInfo b;
    b.kind = pipeline::parse_kind(j.at("kind").get<std::string>());
    const auto &a = j.at("arch");
    b.arch.eeg_channels = a.at("eeg_channels").get<std::size_t>();
    b.arch.conv_out = a.at("conv_out").get<std::size_t>();
    b.arch.kernel = a.at("kernel").get<std::size_t>();
    b.arch.stride = a.at("stride").get<std::size_t>();
    b.arch.window_s = a.at("window_s").get<double>();
    b.channels = j.at("channels").get<std::vector<std::string>>();
    b.bits = j.at("bits").get<int>();
    const auto &p = j.at("preprocess");
    b.bandpass = p.at("bandpass").get<bool>();
    b.notch = p.at("notch").get<bool>();
    b.notch_q = p.at("notch_q").get<double>();
    if (b.kind == pipeline::ModelKind::hybrid)
      b.adm_threshold = j.at("adm_threshold").get<double>();
    pipeline::validate(b.arch);
    return b;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError("model.json", e.what());
  }
}

inline pipeline::HybridModel<float> load_hybrid(const std::filesystem::path &dir) {
  const auto info = read_info(dir);
  if (info.kind != pipeline::ModelKind::hybrid)
    throw FormatError("kind", "checkpoint holds a " + pipeline::kind_name(info.kind) +
                                  " model, expected hybrid");
  pipeline::HybridModel<float> m(info.arch);
  m.adm.threshold = info.adm_threshold;
  m.mode = pipeline::HybridMode::infer;
  try {
    detail::read_tensors(dir, detail::read_manifest_json(dir), m);
  } catch (const nlohmann::json::exception &e) {
    throw FormatError("tensors", e.what());
  }
  return m;
}

inline pipeline::ReferenceCnn<float> load_reference(const std::filesystem::path &dir) {
  const auto info = read_info(dir);
  if (info.kind != pipeline::ModelKind::reference)
    throw FormatError("kind", "checkpoint holds a " + pipeline::kind_name(info.kind) +
                                  " model, expected reference");
  pipeline::ReferenceCnn<float> m(info.arch, false);
  try {
    detail::read_tensors(dir, detail::read_manifest_json(dir), m);
  } catch (const nlohmann::json::exception &e) {
    throw FormatError("tensors", e.what());
  }
  return m;
}

} // namespace corticospike::checkpoint
