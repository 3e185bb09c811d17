#include "cbff/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace cbff {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<int64_t> parse_int_list(const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoll(trim(item)));
  return out;
}

std::string join_int_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("not a boolean: " + v);
}

nn::DecoderVariant decoder_from_name(const std::string& s) {
  if (s == "cbff") return nn::DecoderVariant::cbff;
  if (s == "cnn" || s == "cnn_only") return nn::DecoderVariant::cnn_only;
  if (s == "trans" || s == "trans_only") return nn::DecoderVariant::trans_only;
  throw ConfigError("unknown decoder variant: " + s);
}

}  // namespace

std::string eval_head_name(EvalHead h) {
  switch (h) {
    case EvalHead::conv: return "conv";
    case EvalHead::trans: return "trans";
    default: return "avg";
  }
}

EvalHead eval_head_from_name(const std::string& s) {
  if (s == "avg") return EvalHead::avg;
  if (s == "conv") return EvalHead::conv;
  if (s == "trans") return EvalHead::trans;
  throw ConfigError("unknown eval head: " + s);
}

void TrainConfig::validate() const {
  check_config(tau > 0.0 && tau < 1.0, "tau must lie in (0,1)");
  check_config(lambda1 >= 0.0 && lambda2 >= 0.0, "loss weights must be non-negative");
  check_config(lr > 0.0, "learning rate must be positive");
  check_config(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  check_config(weight_decay >= 0.0, "weight decay must be non-negative");
  check_config(epochs >= 1, "epochs must be >= 1");
  check_config(batch_size >= 1, "batch size must be >= 1");
  check_config(checkpoint_every >= 1, "checkpoint_every must be >= 1");
  check_config(workers >= 0, "workers must be >= 0");
  check_config(model.encoder_widths.size() == 4, "encoder_widths needs 4 entries");
  check_config(model.encoder_blocks.size() == 4, "encoder_blocks needs 4 entries");
  for (int64_t w : model.encoder_widths) check_config(w >= 4, "encoder widths must be >= 4");
  for (int64_t b : model.encoder_blocks) check_config(b >= 1, "encoder blocks must be >= 1");
  check_config(model.decoder_width >= 4, "decoder width must be >= 4");
  check_config(model.decoder_width % model.attention_heads == 0,
               "decoder width must divide attention head count");
}

std::string TrainConfig::serialize() const {
  char buf[64];
  std::string out;
  auto kv = [&out](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  auto kvd = [&](const std::string& k, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    kv(k, buf);
  };
  kvd("tau", tau);
  kvd("lambda1", lambda1);
  kvd("lambda2", lambda2);
  kvd("lr", lr);
  kvd("momentum", momentum);
  kvd("weight_decay", weight_decay);
  kv("lr_poly_decay", lr_poly_decay ? "true" : "false");
  kv("epochs", std::to_string(epochs));
  kv("batch_size", std::to_string(batch_size));
  kv("seed", std::to_string(seed));
  kv("decoder", nn::decoder_name(model.decoder));
  kv("encoder_widths", join_int_list(model.encoder_widths));
  kv("encoder_blocks", join_int_list(model.encoder_blocks));
  kv("decoder_width", std::to_string(model.decoder_width));
  kv("attention_heads", std::to_string(model.attention_heads));
  kv("allow_large_attention", model.allow_large_attention ? "true" : "false");
  kv("eval_head", eval_head_name(eval_head));
  kv("mask_low_confidence", mask_low_confidence ? "true" : "false");
  kv("checkpoint_every", std::to_string(checkpoint_every));
  kv("workers", std::to_string(workers));
  return out;
}

uint64_t TrainConfig::hash() const { return fnv1a64(serialize()); }

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  try {
    if (key == "tau") cfg.tau = std::stod(v);
    else if (key == "lambda1") cfg.lambda1 = std::stod(v);
    else if (key == "lambda2") cfg.lambda2 = std::stod(v);
    else if (key == "lr") cfg.lr = std::stod(v);
    else if (key == "momentum") cfg.momentum = std::stod(v);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(v);
    else if (key == "lr_schedule") {
      if (v == "poly") cfg.lr_poly_decay = true;
      else if (v == "constant") cfg.lr_poly_decay = false;
      else throw ConfigError("unknown lr schedule: " + v);
    }
    else if (key == "epochs") cfg.epochs = std::stoll(v);
    else if (key == "batch_size") cfg.batch_size = std::stoll(v);
    else if (key == "seed") cfg.seed = std::stoull(v);
    else if (key == "decoder") cfg.model.decoder = decoder_from_name(v);
    else if (key == "encoder_preset") {
      if (v == "toy") {
        auto keep = cfg.model.decoder;
        bool allow = cfg.model.allow_large_attention;
        cfg.model = nn::ModelConfig::toy();
        cfg.model.decoder = keep;
        cfg.model.allow_large_attention = allow;
      } else if (v == "resnet50") {
        cfg.model.encoder_widths = {256, 512, 1024, 2048};
        cfg.model.encoder_blocks = {3, 4, 6, 3};
      } else {
        throw ConfigError("unknown encoder preset: " + v);
      }
    } else if (key == "encoder_widths") cfg.model.encoder_widths = parse_int_list(v);
    else if (key == "encoder_blocks") cfg.model.encoder_blocks = parse_int_list(v);
    else if (key == "decoder_width") cfg.model.decoder_width = std::stoll(v);
    else if (key == "attention_heads") cfg.model.attention_heads = std::stoll(v);
    else if (key == "allow_large_attention") cfg.model.allow_large_attention = parse_bool(v);
    else if (key == "eval_head") cfg.eval_head = eval_head_from_name(v);
    else if (key == "mask_low_confidence") cfg.mask_low_confidence = parse_bool(v);
    else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoll(v);
    else if (key == "workers") cfg.workers = std::stoi(v);
    else throw ConfigError("unknown config key: " + key);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value for config key " + key + ": " + v);
  }
}

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
    apply_override(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return base;
}

TrainConfig load_config_file(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), base);
}

}  // namespace cbff
