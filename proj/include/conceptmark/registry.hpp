#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace conceptmark {

enum class ConceptKind { Object, Style, General };

std::string_view kind_name(ConceptKind kind);
ConceptKind parse_kind(std::string_view name);

/// Fixed-length 0/1 vector identifying one concept.
struct Secret {
  std::vector<int> bits;

  Secret() = default;
  /// Validates that every entry is 0 or 1.
  explicit Secret(std::vector<int> values);

  int length() const { return static_cast<int>(bits.size()); }
  /// 0 -> -1, 1 -> +1, the form both encoder networks consume.
  std::vector<double> signed_values() const;
  std::string str() const;

  bool operator==(const Secret&) const = default;
};

Secret random_secret(int n_bits, std::uint64_t seed);

struct ConceptRecord {
  std::string concept_id;
  std::string token;
  ConceptKind kind = ConceptKind::Object;
  Secret secret;
  std::string query_template;

  std::string render_query() const;
  bool operator==(const ConceptRecord&) const = default;
};

enum class TemplateBank { Style, Object, Multi };

/// Training and inference prompt templates. Single-concept banks use "[name]";
/// the multi bank uses "[name_object]" and "[name_style]".
const std::vector<std::string>& template_bank(TemplateBank bank);
std::string default_query_template(ConceptKind kind);

/// "<sks-object>" -> "sks-object"; plain words map to themselves.
std::string concept_id_for_token(std::string_view token);

class Registry {
 public:
  static constexpr int kSchemaVersion = 1;
  static constexpr int kMaxRedraws = 1000;

  explicit Registry(int n_bits = 16, std::uint64_t seed = 0);

  const ConceptRecord& register_concept(const std::string& token, ConceptKind kind,
                                        std::optional<Secret> secret = std::nullopt,
                                        std::optional<std::string> query_template = std::nullopt);

  const ConceptRecord& get(std::string_view concept_id) const;
  const ConceptRecord* find(std::string_view concept_id) const;
  const ConceptRecord* find_by_token(std::string_view token) const;
  bool contains(std::string_view concept_id) const { return find(concept_id) != nullptr; }

  const std::vector<ConceptRecord>& records() const { return records_; }
  std::vector<std::string> ids(std::optional<ConceptKind> kind = std::nullopt) const;
  int n_bits() const { return n_bits_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return records_.size(); }

  std::string render_query(std::string_view concept_id) const;
  std::string render_training_prompt(std::string_view concept_id, TemplateBank bank, std::size_t index) const;
  /// Multi-concept prompt naming one object and one style concept.
  std::string render_pair_prompt(std::string_view object_id, std::string_view style_id, std::size_t index) const;

  nlohmann::json to_json() const;
  static Registry from_json(const nlohmann::json& j);
  /// Digest of the canonical JSON form.
  std::string digest() const;

  bool operator==(const Registry& other) const {
    return n_bits_ == other.n_bits_ && records_ == other.records_;
  }

 private:
  int n_bits_;
  std::uint64_t seed_;
  std::vector<ConceptRecord> records_;
};

void save_registry(const Registry& registry, const std::filesystem::path& path);
Registry load_registry(const std::filesystem::path& path);

struct MultiConceptSample {
  std::string prompt;
  std::vector<std::string> targets;

  bool operator==(const MultiConceptSample&) const = default;
};

/// True when `concept_id` occurs in `prompt` as a whitespace-separated word, either bare
/// or in angle brackets. Trailing punctuation on prompt words is ignored.
bool prompt_mentions(std::string_view prompt, std::string_view concept_id);
std::vector<std::string> split_words(std::string_view text);

std::vector<MultiConceptSample> parse_multiconcept_dataset(std::string_view text);
std::vector<MultiConceptSample> load_multiconcept_dataset(const std::filesystem::path& path);
void save_multiconcept_dataset(const std::vector<MultiConceptSample>& samples, const std::filesystem::path& path);

/// Whole-file helpers shared by every module that persists artifacts.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace conceptmark
