#include "amtidin/checkpoint.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace amtidin::checkpoint {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

struct Blob {
  std::string name;
  std::vector<int> shape;
  const float* data;
  std::size_t count;
};

std::uint32_t crc_of(const void* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* b = static_cast<const Bytef*>(p);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, b, chunk);
    b += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

std::string sn_prefix(int p) {
  return "disc." + std::string(task_name(static_cast<Task>(kTaskPairs[p][0]))) + "_" +
         std::string(task_name(static_cast<Task>(kTaskPairs[p][1])));
}

// Named non-trainable buffers in a fixed order; pointers into the model.
template <typename M, typename F>
void for_each_buffer(M& m, F&& f) {
  for (int k = 0; k < 3; ++k) {
    f("extractor.bn" + std::to_string(k) + ".running_mean", m.conv[k].bn.running_mean);
    f("extractor.bn" + std::to_string(k) + ".running_var", m.conv[k].bn.running_var);
  }
  for (int p = 0; p < 3; ++p) {
    if (!m.disc[p]) continue;
    f(sn_prefix(p) + ".l1.sn_u", m.disc[p]->sn1.u);
    f(sn_prefix(p) + ".l1.sn_v", m.disc[p]->sn1.v);
    f(sn_prefix(p) + ".l2.sn_u", m.disc[p]->sn2.u);
    f(sn_prefix(p) + ".l2.sn_v", m.disc[p]->sn2.v);
  }
}

json matrix_json(const Eigen::Matrix3d& a) {
  json j = json::array();
  for (int r = 0; r < 3; ++r) j.push_back({a(r, 0), a(r, 1), a(r, 2)});
  return j;
}

}  // namespace

std::string arch_to_json(const model::ArchConfig& a) {
  json j;
  j["n"] = a.n;
  j["m_classes"] = a.m_classes;
  j["i_classes"] = a.i_classes;
  j["feature_dim"] = a.feature_dim;
  j["hyp_hidden"] = a.hyp_hidden;
  j["hyp_out"] = a.hyp_out;
  j["dropout"] = a.dropout;
  j["adv_output_mode"] = std::string(model::adv_mode_name(a.adv_output_mode));
  j["variant"] = std::string(model::variant_name(a.variant));
  j["sn_power_iters"] = a.sn_power_iters;
  return j.dump();
}

model::ArchConfig arch_from_json(const std::string& text) {
  model::ArchConfig a;
  try {
    const json j = json::parse(text);
    a.n = j.value("n", a.n);
    a.m_classes = j.value("m_classes", a.m_classes);
    a.i_classes = j.value("i_classes", a.i_classes);
    a.feature_dim = j.value("feature_dim", a.feature_dim);
    a.hyp_hidden = j.value("hyp_hidden", a.hyp_hidden);
    a.hyp_out = j.value("hyp_out", a.hyp_out);
    a.dropout = j.value("dropout", a.dropout);
    if (j.contains("adv_output_mode")) a.adv_output_mode = model::adv_mode_from_name(j["adv_output_mode"].get<std::string>());
    if (j.contains("variant")) a.variant = model::variant_from_name(j["variant"].get<std::string>());
    a.sn_power_iters = j.value("sn_power_iters", a.sn_power_iters);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("arch config: ") + e.what());
  }
  a.validate();
  return a;
}

std::vector<std::uint8_t> serialize_checkpoint(const model::AmtidinModel<float>& m, const TrainingState* state) {
  std::vector<Blob> blobs;
  auto params = m.parameters();
  for (const auto* p : params)
    blobs.push_back({p->name, p->shape, p->value.data(), static_cast<std::size_t>(p->value.size())});
  for_each_buffer(m, [&](const std::string& name, const ad::Vec<float>& v) {
    blobs.push_back({name, {static_cast<int>(v.size())}, v.data(), static_cast<std::size_t>(v.size())});
  });
  if (state) {
    const auto& ad = state->adam;
    if (!ad.m.empty()) {
      if (ad.m.size() != params.size() || ad.v.size() != params.size())
        throw ShapeError("serialize_checkpoint: Adam moments do not match the parameter list");
      for (std::size_t k = 0; k < params.size(); ++k) {
        blobs.push_back({"adam.m." + params[k]->name, params[k]->shape, ad.m[k].data(),
                         static_cast<std::size_t>(ad.m[k].size())});
        blobs.push_back({"adam.v." + params[k]->name, params[k]->shape, ad.v[k].data(),
                         static_cast<std::size_t>(ad.v[k].size())});
      }
    }
  }

  json manifest;
  manifest["format"] = "AMCK";
  manifest["arch"] = json::parse(arch_to_json(m.arch));
  json sn_seeds = json::object();
  for (int p = 0; p < 3; ++p)
    if (m.disc[p]) sn_seeds[sn_prefix(p)] = {m.disc[p]->sn1.seed, m.disc[p]->sn2.seed};
  manifest["sn_seeds"] = sn_seeds;
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& b : blobs) {
    tensors.push_back({{"name", b.name},
                       {"shape", b.shape},
                       {"offset", offset},
                       {"count", b.count},
                       {"crc32", crc_of(b.data, b.count * sizeof(float))}});
    offset += b.count * sizeof(float);
  }
  manifest["tensors"] = tensors;
  if (state) {
    json s;
    s["alpha"] = matrix_json(state->alpha);
    s["adam"] = {{"lr", state->adam.lr},
                 {"beta1", state->adam.beta1},
                 {"beta2", state->adam.beta2},
                 {"eps", state->adam.eps},
                 {"step", state->adam.step},
                 {"has_moments", !state->adam.m.empty()}};
    const auto& sc = state->scheduler;
    s["scheduler"] = {{"lr", sc.lr},         {"factor", sc.factor},         {"patience", sc.patience},
                      {"min_lr", sc.min_lr}, {"threshold", sc.threshold},   {"bad_epochs", sc.bad_epochs},
                      {"best", std::isinf(sc.best) ? json(nullptr) : json(sc.best)}};
    s["epoch"] = state->epoch;
    s["best_val"] = std::isinf(state->best_val) ? json(nullptr) : json(state->best_val);
    s["best_epoch"] = state->best_epoch;
    s["log"] = json::parse(state->log_json);
    s["config"] = json::parse(state->config_json);
    manifest["state"] = s;
  } else {
    manifest["state"] = nullptr;
  }

  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  auto put = [&](auto v) {
    std::uint8_t buf[sizeof(v)];
    std::memcpy(buf, &v, sizeof(v));
    out.insert(out.end(), buf, buf + sizeof(v));
  };
  put(kVersion);
  put(static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& b : blobs) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(b.data);
    out.insert(out.end(), p, p + b.count * sizeof(float));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  std::uint32_t version = 0;
  std::uint64_t mlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&mlen, bytes.data() + 8, 8);
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  if (mlen > bytes.size() - 16) throw FormatError("checkpoint: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  const std::size_t base = 16 + mlen;

  Checkpoint ck;
  try {
    ck.model = model::build<float>(arch_from_json(manifest.at("arch").dump()), 0);
    std::map<std::string, std::pair<const std::uint8_t*, std::size_t>> found;
    std::map<std::string, std::vector<int>> shapes;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto off = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (base + off + count * sizeof(float) > bytes.size() || off % sizeof(float) != 0)
        throw FormatError("checkpoint: truncated blob " + name);
      const auto* p = bytes.data() + base + off;
      if (crc_of(p, count * sizeof(float)) != t.at("crc32").get<std::uint32_t>())
        throw FormatError("checkpoint: checksum failure in blob " + name);
      found[name] = {p, count};
      shapes[name] = t.at("shape").get<std::vector<int>>();
    }
    auto fetch = [&](const std::string& name, float* dst, std::size_t count) {
      auto it = found.find(name);
      if (it == found.end()) throw FormatError("checkpoint: missing blob " + name);
      if (it->second.second != count) throw FormatError("checkpoint: size mismatch for blob " + name);
      std::memcpy(dst, it->second.first, count * sizeof(float));
    };
    auto params = ck.model.parameters();
    for (auto* p : params) {
      if (shapes.count(p->name) && shapes[p->name] != p->shape)
        throw FormatError("checkpoint: shape mismatch for " + p->name);
      fetch(p->name, p->value.data(), static_cast<std::size_t>(p->value.size()));
    }
    if (manifest.contains("sn_seeds"))
      for (int p = 0; p < 3; ++p)
        if (ck.model.disc[p] && manifest["sn_seeds"].contains(sn_prefix(p))) {
          ck.model.disc[p]->sn1.seed = manifest["sn_seeds"][sn_prefix(p)][0].get<std::uint64_t>();
          ck.model.disc[p]->sn2.seed = manifest["sn_seeds"][sn_prefix(p)][1].get<std::uint64_t>();
        }
    for_each_buffer(ck.model, [&](const std::string& name, ad::Vec<float>& v) {
      auto it = found.find(name);
      if (it == found.end()) throw FormatError("checkpoint: missing blob " + name);
      v.resize(static_cast<Eigen::Index>(it->second.second));
      if (v.size() > 0) fetch(name, v.data(), it->second.second);
    });

    if (!manifest.at("state").is_null()) {
      const auto& s = manifest["state"];
      TrainingState st;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) st.alpha(r, c) = s.at("alpha")[r][c].get<double>();
      st.adam.lr = s.at("adam").at("lr").get<double>();
      st.adam.beta1 = s["adam"].at("beta1").get<double>();
      st.adam.beta2 = s["adam"].at("beta2").get<double>();
      st.adam.eps = s["adam"].at("eps").get<double>();
      st.adam.step = s["adam"].at("step").get<long>();
      if (s["adam"].at("has_moments").get<bool>()) {
        for (auto* p : params) {
          st.adam.m.emplace_back(p->value.rows(), p->value.cols());
          st.adam.v.emplace_back(p->value.rows(), p->value.cols());
          fetch("adam.m." + p->name, st.adam.m.back().data(), static_cast<std::size_t>(p->value.size()));
          fetch("adam.v." + p->name, st.adam.v.back().data(), static_cast<std::size_t>(p->value.size()));
        }
      }
      const auto& sc = s.at("scheduler");
      st.scheduler.lr = sc.at("lr").get<double>();
      st.scheduler.factor = sc.at("factor").get<double>();
      st.scheduler.patience = sc.at("patience").get<int>();
      st.scheduler.min_lr = sc.at("min_lr").get<double>();
      st.scheduler.threshold = sc.at("threshold").get<double>();
      st.scheduler.bad_epochs = sc.at("bad_epochs").get<int>();
      st.scheduler.best = sc.at("best").is_null() ? std::numeric_limits<double>::infinity() : sc["best"].get<double>();
      st.epoch = s.at("epoch").get<int>();
      st.best_val = s.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : s["best_val"].get<double>();
      st.best_epoch = s.at("best_epoch").get<int>();
      st.log_json = s.at("log").dump();
      st.config_json = s.at("config").dump();
      if (objective::simplex_violation(st.alpha) > 1e-8) throw FormatError("checkpoint: alpha rows are not on the simplex");
      ck.state = std::move(st);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid architecture: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const model::AmtidinModel<float>& m,
                     const TrainingState* state) {
  const auto bytes = serialize_checkpoint(m, state);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ConfigError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace amtidin::checkpoint
