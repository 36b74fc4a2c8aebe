#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "conceptmark/error.hpp"
#include "conceptmark/training.hpp"
#include "support/fixtures.hpp"

using namespace conceptmark;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::ConfigError;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("conceptmark_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

testsupport::TinyWorld& world() {
  static testsupport::TinyWorld w = testsupport::tiny_world();
  return w;
}

}  // namespace

TEST_CASE("step-decay schedule is exact") {
  TrainConfig c;
  c.learning_rate = 1e-4;
  c.lr_decay_gamma = 0.95;
  c.lr_decay_every = 1000;
  CHECK(learning_rate_at(c, 0) == 1e-4);
  CHECK(learning_rate_at(c, 999) == 1e-4);
  CHECK(learning_rate_at(c, 1000) == 1e-4 * 0.95);
  CHECK(learning_rate_at(c, 2500) == 1e-4 * std::pow(0.95, 2.0));
}

TEST_CASE("train config validation and round trip") {
  TrainConfig c;
  CHECK(c.iterations == 5000);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.weights.lambda1 == 5.0);
  c.seed = 77;
  c.concepts = {"circle"};
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["learning_rat"] = 1.0;
  CHECK(code_of([&] { TrainConfig::from_json(j); }) == ErrorCode::ConfigError);
  j = c.to_json();
  j["lr_decay_gamma"] = 1.5;
  CHECK(code_of([&] { TrainConfig::from_json(j); }) == ErrorCode::ConfigError);
  j = c.to_json();
  j["secret_source"] = "other";
  CHECK(code_of([&] { TrainConfig::from_json(j); }) == ErrorCode::ConfigError);
}

TEST_CASE("batches are deterministic and name their concepts") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.batch_size = 16;
  const auto ids = w.registry.ids();
  const auto a = sample_batch(cfg, w.registry, w.backend, ids, 5);
  const auto b = sample_batch(cfg, w.registry, w.backend, ids, 5);
  REQUIRE(a.size() == 16);
  bool pairs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].z == b[i].z);
    CHECK(a[i].secrets == b[i].secrets);
    for (const auto& id : a[i].concept_ids) CHECK(prompt_mentions(a[i].prompt, id));
    pairs = pairs || a[i].concept_ids.size() == 2;
  }
  CHECK(pairs);
  cfg.multi_ratio = 0.0;
  cfg.secret_source = "registry";
  for (const auto& item : sample_batch(cfg, w.registry, w.backend, ids, 6)) {
    REQUIRE(item.concept_ids.size() == 1);
    CHECK(item.secrets[0] == w.registry.get(item.concept_ids[0]).secret);
  }
}

TEST_CASE("zero-initialized encoders are neutral at step 0") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.batch_size = 4;
  ModelState st = init_state(cfg, w.backend, w.registry);
  const auto batch = sample_batch(cfg, w.registry, w.backend, st.trained_concepts, 9);
  ad::Graph g;
  const auto r = forward_batch(g, st, w.backend, w.registry, batch, false);
  CHECK(r.wm_images.value() == r.clean_images);
  const auto b = breakdown(r.terms, cfg.weights);
  CHECK(b.l2_image == 0.0);
  CHECK(b.csd == 0.0);
  CHECK(b.l2_latent == 0.0);

  // ce equals the untrained decoder's BCE on the clean images.
  const auto model = st.retrieval_model(w.backend);
  double ce = 0.0;
  int count = 0;
  std::size_t per = r.clean_images.numel() / batch.size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor im(w.backend.generator.image_shape(),
                    std::vector<double>(r.clean_images.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                                        r.clean_images.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
    for (std::size_t j = 0; j < batch[i].concept_ids.size(); ++j) {
      const auto logits = retrieve(model, {im}, w.registry.render_query(batch[i].concept_ids[j])).front().logits;
      ce += loss_ce(batch[i].secrets[j], logits) * static_cast<double>(logits.size());
      count += static_cast<int>(logits.size());
    }
  }
  CHECK(b.ce == doctest::Approx(ce / count).epsilon(1e-12));
}

TEST_CASE("one update moves parameters against the gradient") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  ModelState st = init_state(cfg, w.backend, w.registry);
  const auto before = st.decoder.get("fc.b").value;
  const auto batch = sample_batch(cfg, w.registry, w.backend, st.trained_concepts, 3);
  train_step(st, w.backend, w.registry, batch);
  CHECK(st.step == 1);
  const auto& p = st.decoder.get("fc.b");
  int checked = 0;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    if (std::abs(p.grad[i]) < 1e-10) continue;
    CHECK((p.value[i] - before[i]) * p.grad[i] < 0.0);
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("non-finite losses abort the step") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  ModelState st = init_state(cfg, w.backend, w.registry);
  st.decoder.get("fc.w").value[0] = std::nan("");
  const auto batch = sample_batch(cfg, w.registry, w.backend, st.trained_concepts, 3);
  CHECK(code_of([&] { train_step(st, w.backend, w.registry, batch); }) == ErrorCode::NonFiniteLoss);
}

TEST_CASE("training is reproducible and leaves the backend untouched") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.iterations = 4;
  const std::string frozen = w.backend.digest();
  std::vector<double> la, lb;
  TrainHooks ha, hb;
  ha.on_step = [&](std::int64_t, const LossBreakdown& b) { la.push_back(b.total); };
  hb.on_step = [&](std::int64_t, const LossBreakdown& b) { lb.push_back(b.total); };
  const auto dir_a = scratch("repro_a"), dir_b = scratch("repro_b");
  ha.checkpoint_dir = dir_a;
  hb.checkpoint_dir = dir_b;
  ha.log_path = dir_a / "loss.jsonl";
  const ModelState a = train(cfg, w.registry, w.backend, ha);
  const ModelState b = train(cfg, w.registry, w.backend, hb);
  CHECK(la == lb);
  CHECK(la.size() == 4);
  CHECK(a.retrieval == b.retrieval);
  CHECK(checkpoint_digest(dir_a / "final") == checkpoint_digest(dir_b / "final"));
  CHECK(w.backend.digest() == frozen);

  std::ifstream log(dir_a / "loss.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "ce", "csd", "l2_image", "reg", "l2_latent", "total"}) CHECK(j.contains(key));
    ++lines;
  }
  CHECK(lines == 4);

  cfg.seed = 1;
  std::vector<double> lc;
  TrainHooks hc;
  hc.on_step = [&](std::int64_t, const LossBreakdown& bd) { lc.push_back(bd.total); };
  train(cfg, w.registry, w.backend, hc);
  CHECK(lc != la);
}

TEST_CASE("checkpoint round trip and integrity") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.iterations = 2;
  const ModelState st = train(cfg, w.registry, w.backend);
  const auto dir = scratch("ckpt");
  save_checkpoint(st, dir);
  const ModelState back = load_checkpoint(dir);
  for (const auto* pair : {&st.retrieval, &st.decoder, &st.concept_encoder, &st.secret_mapper}) {
    nn::ParamGroup rounded = *pair;
    rounded.round_to_float();
    const nn::ParamGroup* loaded = pair == &st.retrieval         ? &back.retrieval
                                   : pair == &st.decoder         ? &back.decoder
                                   : pair == &st.concept_encoder ? &back.concept_encoder
                                                                 : &back.secret_mapper;
    CHECK(*loaded == rounded);
  }
  CHECK(back.step == st.step);
  CHECK(back.optimizer.steps() == st.optimizer.steps());
  CHECK(back.trained_concepts == st.trained_concepts);
  CHECK(back.config.to_json() == st.config.to_json());

  const auto dir2 = scratch("ckpt2");
  save_checkpoint(back, dir2);
  CHECK(checkpoint_digest(dir) == checkpoint_digest(dir2));

  {
    std::fstream f(dir / "decoder.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-2, std::ios::end);
    f.put('\x7f');
  }
  CHECK(code_of([&] { load_checkpoint(dir); }) == ErrorCode::IntegrityError);

  auto manifest = nlohmann::json::parse(read_text_file(dir2 / "manifest.json"));
  manifest["schema_version"] = 99;
  write_text_file(dir2 / "manifest.json", manifest.dump());
  CHECK(code_of([&] { load_checkpoint(dir2); }) == ErrorCode::SchemaVersionMismatch);
  CHECK(code_of([&] { load_checkpoint(scratch("missing")); }) == ErrorCode::IoError);
}

TEST_CASE("backend container round trip") {
  auto& w = world();
  const auto dir = scratch("backend");
  save_backend(w.backend, dir);
  const FrozenBackend back = load_backend(dir);
  CHECK(back.digest() == w.backend.digest());
  CHECK(back.table->concept_embedding("circle") == w.backend.table->concept_embedding("circle"));
}

TEST_CASE("sequential update adds concepts with a fractional budget") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.iterations = 10;
  cfg.concepts = {"circle", "red-stripes"};
  const ModelState st = train(cfg, w.registry, w.backend);
  CHECK(code_of([&] { sequential_update(st, w.registry, w.backend, {"circle"}); }) ==
        ErrorCode::ConceptAlreadyTrained);
  CHECK(code_of([&] { sequential_update(st, w.registry, w.backend, {"nope"}); }) == ErrorCode::UnknownConcept);
  const ModelState next = sequential_update(st, w.registry, w.backend, {"square", "blue-dots"}, 0.2);
  CHECK(next.step == st.step + 2);
  CHECK(next.trained_concepts == std::vector<std::string>{"circle", "red-stripes", "square", "blue-dots"});
  CHECK(next.base_iterations == 10);
}

TEST_CASE("gradient audit agrees with finite differences") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  cfg.iterations = 3;
  cfg.learning_rate = 1e-2;
  ModelState st = train(cfg, w.registry, w.backend);
  const auto batch = sample_batch(cfg, w.registry, w.backend, st.trained_concepts, 21);
  const auto report = gradient_audit(st, w.backend, w.registry, batch, 6, 1e-6);
  CHECK(report.group_error.size() == 4);
  for (const auto& [name, err] : report.group_error) {
    INFO(name);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("watermarked generation validates its requests") {
  auto& w = world();
  auto cfg = testsupport::tiny_train_config();
  const ModelState st = init_state(cfg, w.backend, w.registry);
  const Tensor z = sample_latent(w.backend.generator.latent_shape(), 1);
  const GenerationRequest ok{"a photo of <circle>", {"circle"}, z, 1.0};
  CHECK(generate_watermarked(st, w.backend, w.registry, {ok}).front() ==
        generate_clean(st, w.backend, {ok}).front());
  const GenerationRequest missing{"a photo of a dog", {"circle"}, z, 1.0};
  CHECK(code_of([&] { generate_watermarked(st, w.backend, w.registry, {missing}); }) == ErrorCode::TargetNotInPrompt);
  const GenerationRequest bad_alpha{"art by <red-stripes>", {"red-stripes"}, z, 0.0};
  CHECK(code_of([&] { generate_watermarked(st, w.backend, w.registry, {bad_alpha}); }) == ErrorCode::NonPositiveAlpha);
}
