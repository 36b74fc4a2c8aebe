#include "conceptmark/registry.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "conceptmark/error.hpp"
#include "conceptmark/nn.hpp"

namespace conceptmark {

namespace {

const std::vector<std::string> kStyleBank = {
    "a painting, art by [name]",
    "a rendering, art by [name]",
    "a cropped painting, art by [name]",
    "the painting, art by [name]",
    "a clean painting, art by [name]",
    "a dirty painting, art by [name]",
    "a dark painting, art by [name]",
    "a picture, art by [name]",
    "a cool painting, art by [name]",
    "a close-up painting, art by [name]",
    "a bright painting, art by [name]",
    "a rendition, art by [name]",
    "a nice painting, art by [name]",
    "a small painting, art by [name]",
    "a weird painting, art by [name]",
    "a large painting, art by [name]",
    "a serene landscape painting in the style of [name]",
    "a bustling cityscape in the style of [name]",
    "a painting of a cozy cottage in the woods in the style of [name]",
    "a vibrant underwater scene in the style of [name]",
    "a whimsical painting of a flying elephant in the style of [name]",
    "a still life painting featuring fruit and flowers in the style of [name]",
    "a portrait of a famous historical figure in the style of [name]",
    "a painting of a dreamy night sky in the style of [name]",
    "a colorful abstract painting in the style of [name]",
    "a street scene from Paris in the style of [name]",
    "a depiction of a beautiful sunset over the ocean in the style of [name]",
    "a painting of a peaceful mountain village in the style of [name]",
    "an energetic painting of dancers in motion in the style of [name]",
    "a painting of a snow-covered winter scene in the style of [name]",
    "a painting of a tropical paradise in the style of [name]",
    "a painting of a magical forest filled with fantastical creatures in the style of [name]",
    "a painting of a dramatic stormy seascape in the style of [name]",
    "a portrait of a majestic lion in the style of [name]",
    "a painting of a romantic scene between two lovers in the style of [name]",
    "a painting of a serene Japanese garden in the style of [name]",
    "a painting of a bustling marketplace in the style of [name]",
    "a painting of a tranquil river scene in the style of [name]",
    "a painting of a fiery volcano eruption in the style of [name]",
    "a painting of a futuristic cityscape in the style of [name]",
    "a painting of a whimsical circus scene in the style of [name]",
    "a painting of a mysterious moonlit forest in the style of [name]",
    "a painting of a dramatic desert landscape in the style of [name]",
    "a portrait of a regal peacock in the style of [name]",
    "a painting of a mystical island in the style of [name]",
    "a painting of a lively carnival scene in the style of [name]",
};

const std::vector<std::string> kObjectBank = {
    "a photo of a [name]",
    "a rendering of a [name]",
    "a cropped photo of the [name]",
    "the photo of a [name]",
    "a photo of a clean [name]",
    "a photo of a dirty [name]",
    "a dark photo of the [name]",
    "a photo of my [name]",
    "a photo of the cool [name]",
    "a close-up photo of a [name]",
    "a bright photo of the [name]",
    "a cropped photo of a [name]",
    "a photo of the [name]",
    "a good photo of the [name]",
    "a photo of one [name]",
    "a close-up photo of the [name]",
    "a rendition of the [name]",
    "a photo of the clean [name]",
    "a rendition of a [name]",
    "a photo of a nice [name]",
    "a good photo of a [name]",
    "a photo of the nice [name]",
    "a photo of the small [name]",
    "a photo of the weird [name]",
    "a photo of the large [name]",
    "a photo of a cool [name]",
    "a photo of a small [name]",
    "a photo of a [name] playing sports",
    "a rendering of a [name] at a concert",
    "a cropped photo of the [name] cooking dinner",
    "the photo of a [name] at the beach",
    "a photo of a clean [name] participating in a marathon",
    "a photo of a dirty [name] after a mud run",
    "a dark photo of the [name] exploring a cave",
    "a photo of my [name] at graduation",
    "a photo of the cool [name] performing on stage",
    "a close-up photo of a [name] reading a book",
    "a bright photo of the [name] at a theme park",
    "a cropped photo of a [name] hiking in the mountains",
    "a photo of the [name] painting a mural",
    "a good photo of the [name] at a party",
    "a photo of one [name] playing an instrument",
    "a close-up photo of the [name] giving a speech",
    "a rendition of the [name] during a workout",
    "a photo of the clean [name] gardening",
    "a rendition of a [name] dancing in the rain",
    "a photo of a nice [name] volunteering at a charity event",
    "a photo of a [name] surfing a giant wave",
    "a rendering of a [name] skydiving over a scenic landscape",
    "a cropped photo of the [name] riding a rollercoaster",
    "the photo of a [name] rock climbing a steep cliff",
    "a photo of a clean [name] practicing yoga in a peaceful garden",
    "a photo of a dirty [name] participating in a paintball match",
    "a dark photo of the [name] stargazing at a remote location",
    "a photo of my [name] crossing the finish line at a race",
    "a photo of the cool [name] breakdancing in a crowded street",
    "a close-up photo of a [name] blowing out candles on a birthday cake",
    "a bright photo of the [name] flying a kite on a sunny day",
    "a cropped photo of a [name] ice-skating in a winter wonderland",
    "a photo of the [name] directing a short film",
    "a good photo of the [name] participating in a flash mob",
    "a photo of one [name] skateboarding in an urban park",
    "a close-up photo of the [name] solving a Rubik's cube",
    "a rendition of the [name] fire dancing at a beach party",
    "a photo of the clean [name] planting a tree in a community park",
    "a rendition of a [name] performing a magic trick on stage",
    "a photo of a nice [name] rescuing a kitten from a tree",
};

const std::vector<std::string> kMultiBank = {
    "a photo of a [name_object] in the style of [name_style] with a clear background.",
    "a rendering of a [name_object] in the style of [name_style] with a clear background.",
    "a cropped photo of the [name_object] in the style of [name_style] with a clear background.",
    "the photo of a [name_object] in the style of [name_style] with a clear background.",
    "a photo of a clean [name_object] in the style of [name_style] with a clear background.",
    "a photo of a dirty [name_object] in the style of [name_style] with a clear background.",
    "a dark photo of the [name_object] in the style of [name_style] with a clear background.",
    "a photo of my [name_object] in the style of [name_style] with a clear background.",
    "a photo of the cool [name_object] in the style of [name_style] with a clear background.",
    "a close-up photo of a [name_object] in the style of [name_style] with a clear background.",
    "a bright photo of the [name_object] in the style of [name_style] with a clear background.",
    "a cropped photo of a [name_object] in the style of [name_style] with a clear background.",
    "a photo of the [name_object] in the style of [name_style] with a clear background.",
    "a good photo of the [name_object] in the style of [name_style] with a clear background.",
    "a photo of one [name_object] in the style of [name_style] with a clear background.",
    "a close-up photo of the [name_object] in the style of [name_style] with a clear background.",
    "a rendition of the [name_object] in the style of [name_style] with a clear background.",
    "a photo of the clean [name_object] in the style of [name_style] with a clear background.",
    "a rendition of a [name_object] in the style of [name_style] with a clear background.",
    "a photo of a nice [name_object] in the style of [name_style] with a clear background.",
    "a good photo of a [name_object] in the style of [name_style] with a clear background.",
    "a photo of the nice [name_object] in the style of [name_style] with a clear background.",
    "a photo of the small [name_object] in the style of [name_style] with a clear background.",
    "a photo of the weird [name_object] in the style of [name_style] with a clear background.",
    "a photo of the large [name_object] in the style of [name_style] with a clear background.",
    "a photo of a cool [name_object] in the style of [name_style] with a clear background.",
    "a photo of a small [name_object] in the style of [name_style] with a clear background.",
};

constexpr std::string_view kPlaceholder = "{}";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

std::string replace_all(std::string text, std::string_view needle, std::string_view value) {
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size()))
    text.replace(pos, needle.size(), value);
  return text;
}

std::string trim_punctuation(std::string word) {
  while (!word.empty() && std::string_view(".,;:!?").find(word.back()) != std::string_view::npos) word.pop_back();
  return word;
}

}  // namespace

std::string_view kind_name(ConceptKind kind) {
  switch (kind) {
    case ConceptKind::Object: return "object";
    case ConceptKind::Style: return "style";
    case ConceptKind::General: return "general";
  }
  return "object";
}

ConceptKind parse_kind(std::string_view name) {
  if (name == "object") return ConceptKind::Object;
  if (name == "style") return ConceptKind::Style;
  if (name == "general") return ConceptKind::General;
  fail(ErrorCode::ParseError, "unknown concept kind '" + std::string(name) + "'");
}

Secret::Secret(std::vector<int> values) : bits(std::move(values)) {
  for (int b : bits) require(b == 0 || b == 1, ErrorCode::BadLength, "secret bits must be 0 or 1");
}

std::vector<double> Secret::signed_values() const {
  std::vector<double> out(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) out[i] = bits[i] ? 1.0 : -1.0;
  return out;
}

std::string Secret::str() const {
  std::string s;
  for (int b : bits) s.push_back(b ? '1' : '0');
  return s;
}

Secret random_secret(int n_bits, std::uint64_t seed) {
  require(n_bits > 0, ErrorCode::BadLength, "secret length must be positive");
  std::mt19937_64 rng(seed);
  std::vector<int> bits(static_cast<std::size_t>(n_bits));
  for (int& b : bits) b = static_cast<int>(rng() >> 63);
  return Secret(std::move(bits));
}

std::string ConceptRecord::render_query() const {
  return replace_all(query_template, kPlaceholder, token);
}

const std::vector<std::string>& template_bank(TemplateBank bank) {
  switch (bank) {
    case TemplateBank::Style: return kStyleBank;
    case TemplateBank::Object: return kObjectBank;
    case TemplateBank::Multi: return kMultiBank;
  }
  return kObjectBank;
}

std::string default_query_template(ConceptKind kind) {
  return kind == ConceptKind::Style ? "art by {}" : "a photo of {}";
}

std::string concept_id_for_token(std::string_view token) {
  if (token.size() > 2 && token.front() == '<' && token.back() == '>')
    return std::string(token.substr(1, token.size() - 2));
  return std::string(token);
}

Registry::Registry(int n_bits, std::uint64_t seed) : n_bits_(n_bits), seed_(seed) {
  require(n_bits > 0, ErrorCode::BadLength, "n_bits must be positive");
}

const ConceptRecord& Registry::register_concept(const std::string& token, ConceptKind kind,
                                                std::optional<Secret> secret,
                                                std::optional<std::string> query_template) {
  require(!token.empty() && token.find_first_of(" \t\n") == std::string::npos, ErrorCode::InvalidParameter,
          "token must be a single non-empty word");
  const std::string id = concept_id_for_token(token);
  require(find(id) == nullptr && find_by_token(token) == nullptr, ErrorCode::DuplicateToken,
          "token '" + token + "' already registered");
  std::string tmpl = query_template.value_or(default_query_template(kind));
  require(count_occurrences(tmpl, kPlaceholder) == 1, ErrorCode::InvalidParameter,
          "query template must contain exactly one {} placeholder");

  auto taken = [this](const Secret& s) {
    return std::any_of(records_.begin(), records_.end(), [&](const ConceptRecord& r) { return r.secret == s; });
  };
  if (secret) {
    require(secret->length() == n_bits_, ErrorCode::BadLength,
            "secret has " + std::to_string(secret->length()) + " bits, registry uses " + std::to_string(n_bits_));
    require(!taken(*secret), ErrorCode::SecretCollision, "secret already assigned to another concept");
  } else {
    // Each draw is keyed by (seed, slot, attempt) so registration order alone fixes the secrets.
    const std::uint64_t slot = records_.size();
    for (int attempt = 0;; ++attempt) {
      require(attempt < kMaxRedraws, ErrorCode::SecretCollision,
              "no free secret after " + std::to_string(kMaxRedraws) + " draws");
      const std::uint64_t key[3] = {seed_, slot, static_cast<std::uint64_t>(attempt)};
      Secret candidate = random_secret(n_bits_, nn::fnv1a(key, sizeof key));
      if (!taken(candidate)) {
        secret = std::move(candidate);
        break;
      }
    }
  }
  records_.push_back(ConceptRecord{id, token, kind, std::move(*secret), std::move(tmpl)});
  return records_.back();
}

const ConceptRecord* Registry::find(std::string_view concept_id) const {
  for (const auto& r : records_)
    if (r.concept_id == concept_id) return &r;
  return nullptr;
}

const ConceptRecord* Registry::find_by_token(std::string_view token) const {
  for (const auto& r : records_)
    if (r.token == token) return &r;
  return nullptr;
}

const ConceptRecord& Registry::get(std::string_view concept_id) const {
  const ConceptRecord* r = find(concept_id);
  require(r != nullptr, ErrorCode::UnknownConcept, "unknown concept '" + std::string(concept_id) + "'");
  return *r;
}

std::vector<std::string> Registry::ids(std::optional<ConceptKind> kind) const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (!kind || r.kind == *kind) out.push_back(r.concept_id);
  return out;
}

std::string Registry::render_query(std::string_view concept_id) const { return get(concept_id).render_query(); }

std::string Registry::render_training_prompt(std::string_view concept_id, TemplateBank bank, std::size_t index) const {
  const ConceptRecord& r = get(concept_id);
  require(bank != TemplateBank::Multi, ErrorCode::InvalidParameter, "multi bank needs two concepts");
  const bool style = r.kind == ConceptKind::Style;
  require(style == (bank == TemplateBank::Style), ErrorCode::InvalidParameter,
          "template bank does not match kind of '" + r.concept_id + "'");
  const auto& templates = template_bank(bank);
  require(index < templates.size(), ErrorCode::IndexOutOfRange,
          "template index " + std::to_string(index) + " >= " + std::to_string(templates.size()));
  return replace_all(templates[index], "[name]", r.token);
}

std::string Registry::render_pair_prompt(std::string_view object_id, std::string_view style_id,
                                         std::size_t index) const {
  const ConceptRecord& obj = get(object_id);
  const ConceptRecord& sty = get(style_id);
  require(obj.kind != ConceptKind::Style && sty.kind == ConceptKind::Style, ErrorCode::InvalidParameter,
          "pair prompt needs an object and a style concept");
  const auto& templates = template_bank(TemplateBank::Multi);
  require(index < templates.size(), ErrorCode::IndexOutOfRange,
          "template index " + std::to_string(index) + " >= " + std::to_string(templates.size()));
  return replace_all(replace_all(templates[index], "[name_object]", obj.token), "[name_style]", sty.token);
}

nlohmann::json Registry::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records_)
    recs.push_back({{"concept_id", r.concept_id},
                    {"token", r.token},
                    {"kind", kind_name(r.kind)},
                    {"secret", r.secret.bits},
                    {"query_template", r.query_template}});
  return {{"schema_version", kSchemaVersion}, {"n_bits", n_bits_}, {"seed", seed_}, {"records", recs}};
}

Registry Registry::from_json(const nlohmann::json& j) {
  try {
    require(j.is_object(), ErrorCode::ParseError, "registry must be a JSON object");
    const int version = j.at("schema_version").get<int>();
    require(version == kSchemaVersion, ErrorCode::SchemaVersionMismatch,
            "registry schema " + std::to_string(version) + ", expected " + std::to_string(kSchemaVersion));
    Registry reg(j.at("n_bits").get<int>(), j.value("seed", std::uint64_t{0}));
    std::set<std::string> ids;
    std::set<std::vector<int>> secrets;
    for (const auto& r : j.at("records")) {
      ConceptRecord rec;
      rec.concept_id = r.at("concept_id").get<std::string>();
      rec.token = r.at("token").get<std::string>();
      rec.kind = parse_kind(r.at("kind").get<std::string>());
      rec.secret = Secret(r.at("secret").get<std::vector<int>>());
      rec.query_template = r.at("query_template").get<std::string>();
      require(rec.secret.length() == reg.n_bits_, ErrorCode::IntegrityError,
              "secret of '" + rec.concept_id + "' has the wrong length");
      require(ids.insert(rec.concept_id).second, ErrorCode::IntegrityError,
              "duplicate concept id '" + rec.concept_id + "'");
      require(secrets.insert(rec.secret.bits).second, ErrorCode::IntegrityError,
              "duplicate secret for '" + rec.concept_id + "'");
      require(count_occurrences(rec.query_template, kPlaceholder) == 1, ErrorCode::IntegrityError,
              "bad query template for '" + rec.concept_id + "'");
      reg.records_.push_back(std::move(rec));
    }
    return reg;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("registry: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::BadLength) fail(ErrorCode::IntegrityError, e.what());
    throw;
  }
}

std::string Registry::digest() const {
  const std::string canon = to_json().dump();
  return nn::hex64(nn::fnv1a(canon.data(), canon.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  require(static_cast<bool>(out), ErrorCode::IoError, "short write to " + path.string());
}

void save_registry(const Registry& registry, const std::filesystem::path& path) {
  write_text_file(path, registry.to_json().dump(2) + "\n");
}

Registry load_registry(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return Registry::from_json(j);
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

bool prompt_mentions(std::string_view prompt, std::string_view concept_id) {
  const std::string bracketed = "<" + std::string(concept_id) + ">";
  for (const auto& w : split_words(prompt)) {
    const std::string t = trim_punctuation(w);
    if (t == concept_id || t == bracketed) return true;
  }
  return false;
}

std::vector<MultiConceptSample> parse_multiconcept_dataset(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("dataset: ") + e.what());
  }
  require(j.is_array(), ErrorCode::ParseError, "dataset must be a JSON array");
  std::vector<MultiConceptSample> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    MultiConceptSample s;
    try {
      s.prompt = e.at("prompt").get<std::string>();
      s.targets = e.at("targets").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::ParseError, "dataset entry " + std::to_string(i) + ": " + ex.what());
    }
    for (const auto& t : s.targets)
      require(prompt_mentions(s.prompt, t), ErrorCode::TargetNotInPrompt,
              "entry " + std::to_string(i) + ": target '" + t + "' not in prompt '" + s.prompt + "'");
    require(s.targets.size() >= 2, ErrorCode::ParseError,
            "entry " + std::to_string(i) + ": a multi-concept sample needs at least two targets");
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<MultiConceptSample> load_multiconcept_dataset(const std::filesystem::path& path) {
  return parse_multiconcept_dataset(read_text_file(path));
}

void save_multiconcept_dataset(const std::vector<MultiConceptSample>& samples, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : samples) j.push_back({{"prompt", s.prompt}, {"targets", s.targets}});
  write_text_file(path, j.dump(4) + "\n");
}

}  // namespace conceptmark
