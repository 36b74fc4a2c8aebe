#pragma once

// Small pretrained backends shared by the module tests.

#include "conceptmark/training.hpp"

namespace testsupport {

struct TinyWorld {
  conceptmark::Registry registry;
  conceptmark::FrozenBackend backend;
};

inline conceptmark::BackendBuildConfig tiny_backend_config() {
  conceptmark::BackendBuildConfig cfg;
  cfg.world.shapes = {"circle", "square"};
  cfg.world.styles = {"red-stripes", "blue-dots"};
  cfg.world.samples_per_concept = 6;
  cfg.world.image_size = 16;
  cfg.generator.embedding_dim = 8;
  cfg.generator.latent_shape = {3, 8, 8};
  cfg.generator.image_size = 16;
  cfg.generator.channels = 6;
  cfg.generator.cond_hidden = 16;
  cfg.backbone.c1 = 4;
  cfg.backbone.c2 = 6;
  cfg.backbone.c3 = 8;
  cfg.backbone.text_dim = 8;
  cfg.generator_pretrain.iterations = 20;
  cfg.generator_pretrain.batch_size = 4;
  cfg.backbone_pretrain.iterations = 10;
  cfg.backbone_pretrain.batch_size = 4;
  cfg.seed = 3;
  return cfg;
}

inline TinyWorld tiny_world(int n_bits = 4) {
  TinyWorld w{conceptmark::Registry(n_bits, 11), {}};
  w.backend = conceptmark::build_backend(tiny_backend_config(), w.registry);
  return w;
}

inline conceptmark::TrainConfig tiny_train_config(int n_bits = 4) {
  conceptmark::TrainConfig cfg;
  cfg.iterations = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-3;
  cfg.n_bits = n_bits;
  cfg.hidden_width_multiplier = 1;
  cfg.attn_dim = 4;
  cfg.generation_steps = 2;
  cfg.checkpoint_every = 0;
  return cfg;
}

}  // namespace testsupport
