#include <bit>
#include <cstring>
#include <fstream>

#include "conceptmark/error.hpp"
#include "conceptmark/training.hpp"

namespace conceptmark {

static_assert(std::endian::native == std::endian::little, "blob layout assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'M', 'T', 'B'};
constexpr std::uint32_t kBlobVersion = 1;
constexpr int kCheckpointSchema = 1;

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(const std::string& in, std::size_t& at, const std::string& what) {
  require(at + 4 <= in.size(), ErrorCode::IntegrityError, "truncated blob " + what);
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  at += 4;
  return v;
}

std::string read_binary(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::IoError, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

json encoding_json(const EncodingConfig& e) {
  return {{"embedding_dim", e.embedding_dim},
          {"n_bits", e.n_bits},
          {"hidden_width_multiplier", e.hidden_width_multiplier},
          {"mapper_gain", e.mapper_gain},
          {"latent_shape", e.latent_shape}};
}

EncodingConfig encoding_from(const json& j) {
  EncodingConfig e;
  e.embedding_dim = j.at("embedding_dim").get<int>();
  e.n_bits = j.at("n_bits").get<int>();
  e.hidden_width_multiplier = j.at("hidden_width_multiplier").get<int>();
  e.mapper_gain = j.at("mapper_gain").get<double>();
  e.latent_shape = j.at("latent_shape").get<ad::Shape>();
  return e;
}

void load_group(nn::ParamGroup& group, const std::filesystem::path& path, const std::string& digest) {
  const auto records = read_tensor_blob(path);
  require(records.size() == group.params().size(), ErrorCode::IntegrityError,
          "parameter count mismatch in " + path.string());
  for (const auto& [name, value] : records) {
    require(group.contains(name), ErrorCode::IntegrityError, "unexpected parameter " + name);
    auto& p = group.get(name);
    require(p.value.shape == value.shape, ErrorCode::IntegrityError, "shape mismatch for " + name);
    p.value = value;
    p.grad = Tensor(value.shape);
  }
  require(nn::group_digest(group) == digest, ErrorCode::IntegrityError, "digest mismatch for group " + group.name());
}

}  // namespace

void write_tensor_blob(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::string out(kMagic, 4);
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) {
      const float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), sizeof f);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorCode::IoError, "cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  require(f.good(), ErrorCode::IoError, "write failed for " + path.string());
}

std::vector<std::pair<std::string, Tensor>> read_tensor_blob(const std::filesystem::path& path) {
  const std::string in = read_binary(path);
  const std::string what = path.string();
  require(in.size() >= 12 && std::memcmp(in.data(), kMagic, 4) == 0, ErrorCode::IntegrityError,
          "bad blob header in " + what);
  std::size_t at = 4;
  const std::uint32_t version = get_u32(in, at, what);
  require(version == kBlobVersion, ErrorCode::SchemaVersionMismatch, "blob version " + std::to_string(version));
  const std::uint32_t count = get_u32(in, at, what);
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = get_u32(in, at, what);
    require(at + len <= in.size(), ErrorCode::IntegrityError, "truncated blob " + what);
    std::string name = in.substr(at, len);
    at += len;
    const std::uint32_t rank = get_u32(in, at, what);
    require(rank <= 8, ErrorCode::IntegrityError, "implausible rank in " + what);
    ad::Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get_u32(in, at, what)));
    Tensor t(shape);
    require(at + 4 * t.numel() <= in.size(), ErrorCode::IntegrityError, "truncated blob " + what);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      float f;
      std::memcpy(&f, in.data() + at, 4);
      at += 4;
      t[i] = f;
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  require(at == in.size(), ErrorCode::IntegrityError, "trailing bytes in " + what);
  return out;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  json groups = json::object();
  for (const nn::ParamGroup* g : {&state.concept_encoder, &state.secret_mapper, &state.retrieval, &state.decoder}) {
    std::vector<std::pair<std::string, Tensor>> recs;
    for (const auto& p : g->params()) recs.emplace_back(p.name, p.value);
    write_tensor_blob(dir / (g->name() + ".bin"), recs);
    groups[g->name()] = {{"file", g->name() + ".bin"}, {"digest", nn::group_digest(*g)}};
  }
  std::vector<std::pair<std::string, Tensor>> moments;
  for (const auto& [k, t] : state.optimizer.first_moments()) moments.emplace_back("m/" + k, t);
  for (const auto& [k, t] : state.optimizer.second_moments()) moments.emplace_back("v/" + k, t);
  write_tensor_blob(dir / "optimizer.bin", moments);
  const json manifest = {{"format", "conceptmark.checkpoint"},
                         {"schema_version", kCheckpointSchema},
                         {"step", state.step},
                         {"base_iterations", state.base_iterations},
                         {"config", state.config.to_json()},
                         {"encoding", encoding_json(state.encoding)},
                         {"retrieval_config", state.retrieval_cfg.to_json()},
                         {"trained_concepts", state.trained_concepts},
                         {"registry_digest", state.registry_digest},
                         {"backend_digest", state.backend_digest},
                         {"groups", groups},
                         {"optimizer", {{"file", "optimizer.bin"}, {"t", state.optimizer.steps()}}}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ModelState load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path mpath = dir / "manifest.json";
  json j;
  try {
    j = json::parse(read_text_file(mpath));
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, mpath.string() + ": " + e.what());
  }
  if (j.value("format", "") != "conceptmark.checkpoint") fail(ErrorCode::ParseError, "not a checkpoint: " + dir.string());
  if (j.value("schema_version", 0) != kCheckpointSchema)
    fail(ErrorCode::SchemaVersionMismatch, "checkpoint schema version " + j.value("schema_version", json()).dump());
  ModelState s;
  try {
    s.config = TrainConfig::from_json(j.at("config"));
    s.encoding = encoding_from(j.at("encoding"));
    s.retrieval_cfg = RetrievalConfig::from_json(j.at("retrieval_config"));
    s.step = j.at("step").get<std::int64_t>();
    s.base_iterations = j.at("base_iterations").get<std::int64_t>();
    s.trained_concepts = j.at("trained_concepts").get<std::vector<std::string>>();
    s.registry_digest = j.at("registry_digest").get<std::string>();
    s.backend_digest = j.at("backend_digest").get<std::string>();
    s.concept_encoder = make_concept_encoder(s.encoding, 0);
    s.secret_mapper = make_secret_mapper(s.encoding, 0);
    s.retrieval = make_retrieval_params(s.retrieval_cfg, 0);
    s.decoder = make_decoder_params(s.retrieval_cfg, 0);
    const json& groups = j.at("groups");
    for (nn::ParamGroup* g : s.trainable()) {
      const json& e = groups.at(g->name());
      load_group(*g, dir / e.at("file").get<std::string>(), e.at("digest").get<std::string>());
    }
    std::map<std::string, Tensor> m, v;
    for (auto& [name, t] : read_tensor_blob(dir / j.at("optimizer").at("file").get<std::string>())) {
      require(name.size() > 2 && (name[0] == 'm' || name[0] == 'v') && name[1] == '/', ErrorCode::IntegrityError,
              "bad optimizer record " + name);
      (name[0] == 'm' ? m : v).emplace(name.substr(2), std::move(t));
    }
    s.optimizer = nn::Adam(nn::AdamConfig{s.config.beta1, s.config.beta2, 1e-8});
    s.optimizer.restore(j.at("optimizer").at("t").get<std::int64_t>(), std::move(m), std::move(v));
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("checkpoint manifest: ") + e.what());
  }
  return s;
}

std::string checkpoint_digest(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec))
    if (entry.is_regular_file()) files.push_back(entry.path());
  if (ec) fail(ErrorCode::IoError, "cannot list " + dir.string() + ": " + ec.message());
  std::sort(files.begin(), files.end());
  std::uint64_t h = nn::fnv1a(nullptr, 0);
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const std::string bytes = read_binary(f);
    h = nn::fnv1a(name.data(), name.size(), h);
    h = nn::fnv1a(bytes.data(), bytes.size(), h);
  }
  return nn::hex64(h);
}

}  // namespace conceptmark
