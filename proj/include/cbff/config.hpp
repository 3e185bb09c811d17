#pragma once

#include <string>
#include <vector>

#include "cbff/model.hpp"

namespace cbff {

enum class EvalHead { avg, conv, trans };

std::string eval_head_name(EvalHead h);
EvalHead eval_head_from_name(const std::string& s);

// Every training hyperparameter in one place. Defaults follow the published
// recipe (SGD 0.02 / momentum 0.9 / weight decay 1e-4, 80 epochs, batch 4,
// tau 0.95, equal loss weights).
struct TrainConfig {
  double tau = 0.95;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int64_t epochs = 80;
  int64_t batch_size = 4;
  uint64_t seed = 42;

  nn::ModelConfig model;          // decoder variant, widths, attention guard
  // Polynomial decay lr * (1 - t/T)^0.9 when enabled; constant otherwise
  // (the published recipe names no schedule).
  bool lr_poly_decay = false;
  EvalHead eval_head = EvalHead::avg;
  bool mask_low_confidence = false;  // exclude sub-tau pixels instead of labeling 0
  int64_t checkpoint_every = 10;
  int workers = 0;

  void validate() const;
  // Canonical key=value text (stable order); its hash identifies the config.
  std::string serialize() const;
  uint64_t hash() const;
};

// key = value lines, '#' comments. Unknown keys are errors.
TrainConfig parse_config_text(const std::string& text, TrainConfig base = {});
TrainConfig load_config_file(const std::string& path, TrainConfig base = {});
// Applies one "key=value" override.
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace cbff
