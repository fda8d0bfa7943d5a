#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "packptq/allocator.hpp"
#include "packptq/dataset.hpp"
#include "packptq/evaluate.hpp"
#include "packptq/importance.hpp"
#include "packptq/packer.hpp"
#include "packptq/parallel.hpp"
#include "packptq/qnetwork.hpp"
#include "packptq/reconstruct.hpp"
#include "packptq/serialize.hpp"
#include "packptq/train.hpp"

namespace packptq {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------------------
// Configuration document

/// Every recognised key with its default. Config files and overrides may only
/// set keys that appear here.
inline json default_config() {
  return json::parse(R"({
  "version": 1,
  "model": "fixtures/resmlp-8x32.json",
  "dataset": {"kind": "two-moons-10class", "n": 1024, "test_n": 2048, "seed": 7,
              "classes": null, "dim": null, "image": false},
  "bits": {"w": 3, "a": 3, "edge": "auto"},
  "candidates": "auto",
  "budget": "auto",
  "mixed_precision": true,
  "packing": {"strategy": "hada", "fixed_size": 2, "max_pack_size": 0, "random_packs": 0},
  "scoring": {"sigma_ratio": 0.01, "sigma": null, "num_samples": 2048, "items": 16},
  "calibration": {"samples": 256, "sub_batches": 8},
  "reconstruction": {"enabled": true, "iterations": 500, "batch_size": 32, "base_lr": 4e-5,
                     "offset_lr": 1e-3, "input_source": "quantized-upstream", "log_interval": 10},
  "inputs": {"scores": null, "plan": null, "allocation": null, "quantized_model": null},
  "ablation": {"seeds": [1, 2, 3, 4, 5],
               "cells": ["minmax/uniform", "none/uniform", "random/uniform", "hada/uniform", "hada/mp"]},
  "train": {"arch": "resmlp-8x32", "n": 4096, "data_seed": 1000, "init_seed": 1, "epochs": 60,
            "batch_size": 64, "lr": 0.01, "target_accuracy": 0.95},
  "seed": 1,
  "out": "runs/default"
})");
}

namespace detail {

inline void merge_into(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config" + (path.empty() ? std::string() : " key '" + path + "'") + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    auto it = base.find(key);
    if (it == base.end()) throw ConfigError("config: unknown key '" + p + "'");
    if (it->is_object() && value.is_object()) merge_into(*it, value, p);
    else *it = value;
  }
}

}  // namespace detail

/// Applies `KEY=VALUE` where KEY is a dotted path of an existing key. VALUE is
/// parsed as JSON when possible and taken as a string otherwise.
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &config;
  std::stringstream ss(key);
  std::string part, walked;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    walked += (i ? "." : "") + parts[i];
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("override: unknown key '" + walked + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object() && !value.is_object()) throw ConfigError("override: '" + key + "' is a section, not a value");
  *node = value;
}

struct RunConfig {
  std::string model;
  DatasetSpec dataset;
  std::size_t dataset_n = 1024;
  std::size_t test_n = 2048;
  std::uint64_t dataset_seed = 7;
  int weight_bits = 3;
  int activation_bits = 3;
  int edge_bits = 8;
  std::vector<int> candidates;
  std::optional<std::uint64_t> budget;  // nullopt: nominal bits x total block parameters
  bool mixed_precision = true;
  PackStrategy strategy = PackStrategy::hada;
  std::size_t fixed_size = 2;
  std::size_t max_pack_size = 0;
  std::size_t random_packs = 0;  // 0: as many packs as the HAda plan
  PerturbationConfig scoring;
  ActivationCalibration calibration;
  bool reconstruct = true;
  ReconstructionConfig reconstruction;
  std::string scores_path, plan_path, allocation_path, quantized_model_path;
  std::vector<std::uint64_t> ablation_seeds;
  std::vector<std::string> ablation_cells;
  std::string train_arch;
  std::size_t train_n = 4096;
  std::uint64_t train_data_seed = 1000;
  std::uint64_t init_seed = 1;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::filesystem::path out;
  json document;  // effective configuration, echoed into reports
};

namespace detail {

struct Reader {
  const json& doc;

  const json& at(const std::string& dotted) const {
    const json* node = &doc;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) node = &node->at(part);
    return *node;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("config: " + key + " " + what);
  }
  long long integer(const std::string& key, long long lo, long long hi) const {
    const json& v = at(key);
    if (!v.is_number_integer()) fail(key, "must be an integer");
    const long long x = v.get<long long>();
    if (x < lo || x > hi) fail(key, "must be in " + std::to_string(lo) + ".." + std::to_string(hi) + ", got " + std::to_string(x));
    return x;
  }
  std::uint64_t seed(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number_unsigned()) fail(key, "must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  double number(const std::string& key, double lo) const {
    const json& v = at(key);
    if (!v.is_number()) fail(key, "must be a number");
    const double x = v.get<double>();
    if (!(x >= lo) || !std::isfinite(x)) fail(key, "must be >= " + std::to_string(lo));
    return x;
  }
  bool boolean(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_boolean()) fail(key, "must be true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_string()) fail(key, "must be a string");
    return v.get<std::string>();
  }
  std::string path(const std::string& key) const {
    const json& v = at(key);
    if (v.is_null()) return {};
    if (!v.is_string()) fail(key, "must be a path string or null");
    return v.get<std::string>();
  }
  bool is_auto(const std::string& key) const { return at(key).is_string() && at(key).get<std::string>() == "auto"; }
};

}  // namespace detail

inline RunConfig parse_run_config(const json& doc) {
  const detail::Reader r{doc};
  RunConfig c;
  c.document = doc;
  if (r.integer("version", 0, 1 << 20) != kConfigVersion) {
    throw ConfigError("config: unsupported version " + doc.at("version").dump() + " (expected " + std::to_string(kConfigVersion) + ")");
  }
  c.model = r.path("model");

  c.dataset = DatasetSpec::defaults_for(r.string("dataset.kind"));
  if (!doc["dataset"]["classes"].is_null()) c.dataset.classes = static_cast<std::size_t>(r.integer("dataset.classes", 2, 1000));
  if (!doc["dataset"]["dim"].is_null()) c.dataset.dim = static_cast<std::size_t>(r.integer("dataset.dim", 1, 1 << 20));
  c.dataset.image = r.boolean("dataset.image");
  detail::validate_spec(c.dataset);
  c.dataset_n = static_cast<std::size_t>(r.integer("dataset.n", 64, 1 << 24));
  c.test_n = static_cast<std::size_t>(r.integer("dataset.test_n", 1, 1 << 24));
  c.dataset_seed = r.seed("dataset.seed");

  c.weight_bits = static_cast<int>(r.integer("bits.w", 2, kBypassBits));
  c.activation_bits = static_cast<int>(r.integer("bits.a", 2, kBypassBits));
  if (r.is_auto("candidates")) {
    c.candidates = default_candidates(c.weight_bits);
  } else {
    const json& k = doc.at("candidates");
    if (!k.is_array() || k.empty()) r.fail("candidates", "must be \"auto\" or a non-empty array of bit-widths");
    for (const json& v : k) {
      if (!v.is_number_integer() || v.get<int>() < 2 || v.get<int>() > kBypassBits) r.fail("candidates", "entries must be integers in 2..32");
      c.candidates.push_back(v.get<int>());
    }
  }
  // Stem and head sit outside packing and take the widest candidate.
  c.edge_bits = r.is_auto("bits.edge") ? *std::max_element(c.candidates.begin(), c.candidates.end())
                                       : static_cast<int>(r.integer("bits.edge", 2, kBypassBits));
  if (!r.is_auto("budget")) c.budget = r.seed("budget");
  c.mixed_precision = r.boolean("mixed_precision");

  c.strategy = parse_strategy(r.string("packing.strategy"));
  c.fixed_size = static_cast<std::size_t>(r.integer("packing.fixed_size", 1, 1 << 20));
  c.max_pack_size = static_cast<std::size_t>(r.integer("packing.max_pack_size", 0, 1 << 20));
  c.random_packs = static_cast<std::size_t>(r.integer("packing.random_packs", 0, 1 << 20));

  c.scoring.sigma_ratio = r.number("scoring.sigma_ratio", 0.0);
  if (!doc["scoring"]["sigma"].is_null()) c.scoring.sigma = r.number("scoring.sigma", 0.0);
  c.scoring.num_samples = static_cast<std::size_t>(r.integer("scoring.num_samples", 1, 1 << 26));
  c.scoring.items = static_cast<std::size_t>(r.integer("scoring.items", 1, 1 << 20));
  if (c.scoring.items > c.dataset_n) r.fail("scoring.items", "exceeds the calibration set size");

  c.calibration.samples = static_cast<std::size_t>(r.integer("calibration.samples", 1, 1 << 24));
  c.calibration.sub_batches = static_cast<std::size_t>(r.integer("calibration.sub_batches", 1, 1 << 20));

  c.reconstruct = r.boolean("reconstruction.enabled");
  c.reconstruction.iterations = static_cast<std::size_t>(r.integer("reconstruction.iterations", 1, 1 << 24));
  c.reconstruction.batch_size = static_cast<std::size_t>(r.integer("reconstruction.batch_size", 1, 1 << 20));
  c.reconstruction.base_lr = r.number("reconstruction.base_lr", 0.0);
  c.reconstruction.offset_lr = r.number("reconstruction.offset_lr", 0.0);
  c.reconstruction.input_source = parse_input_source(r.string("reconstruction.input_source"));
  c.reconstruction.log_interval = static_cast<std::size_t>(r.integer("reconstruction.log_interval", 1, 1 << 20));
  c.reconstruction.validate(c.dataset_n);

  c.scores_path = r.path("inputs.scores");
  c.plan_path = r.path("inputs.plan");
  c.allocation_path = r.path("inputs.allocation");
  c.quantized_model_path = r.path("inputs.quantized_model");

  const json& seeds = doc.at("ablation").at("seeds");
  if (!seeds.is_array() || seeds.empty()) r.fail("ablation.seeds", "must be a non-empty array");
  for (const json& s : seeds) {
    if (!s.is_number_unsigned()) r.fail("ablation.seeds", "entries must be non-negative integers");
    c.ablation_seeds.push_back(s.get<std::uint64_t>());
  }
  const json& cells = doc.at("ablation").at("cells");
  if (!cells.is_array() || cells.empty()) r.fail("ablation.cells", "must be a non-empty array");
  for (const json& s : cells) {
    if (!s.is_string()) r.fail("ablation.cells", "entries must be strings");
    c.ablation_cells.push_back(s.get<std::string>());
  }

  c.train_arch = r.string("train.arch");
  c.train_n = static_cast<std::size_t>(r.integer("train.n", 64, 1 << 24));
  c.train_data_seed = r.seed("train.data_seed");
  c.init_seed = r.seed("train.init_seed");
  c.train.epochs = static_cast<std::size_t>(r.integer("train.epochs", 1, 1 << 20));
  c.train.batch_size = static_cast<std::size_t>(r.integer("train.batch_size", 1, 1 << 20));
  c.train.lr = r.number("train.lr", 0.0);
  c.train.target_accuracy = r.number("train.target_accuracy", 0.0);

  c.seed = r.seed("seed");
  c.out = r.string("out");
  if (c.out.empty()) r.fail("out", "must not be empty");
  c.scoring.seed = c.seed;
  c.reconstruction.seed = c.seed;
  c.train.seed = c.init_seed;
  return c;
}

/// Defaults, then the config file, then each override in order.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  json doc = default_config();
  if (file) {
    if (!std::filesystem::exists(*file)) throw ConfigError("config file not found: '" + file->string() + "'");
    detail::merge_into(doc, read_json_file(*file), "");
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  return parse_run_config(doc);
}

// ---------------------------------------------------------------------------
// Shared stage helpers

inline std::vector<std::size_t> block_param_counts(const Network& net) {
  std::vector<std::size_t> p;
  for (const Block& b : net.blocks) p.push_back(b.param_count());
  return p;
}

/// Plan for a strategy. Random plans draw as many packs as `reference_packs`.
inline PackPlan make_plan(PackStrategy strategy, const std::vector<double>& scores, std::uint64_t seed, std::size_t fixed_size,
                          std::size_t max_pack_size, std::size_t random_packs) {
  const std::size_t n = scores.size();
  PackPlan plan;
  switch (strategy) {
    case PackStrategy::none:
      plan = partition_none(n);
      break;
    case PackStrategy::hada:
      plan = partition_hada(scores, max_pack_size);
      break;
    case PackStrategy::fixed:
      plan = partition_fixed(n, fixed_size);
      break;
    case PackStrategy::random: {
      const std::size_t target = random_packs ? random_packs : partition_hada(scores, max_pack_size).packs.size();
      plan = partition_random(n, target, seed);
      break;
    }
  }
  plan.scores = scores;
  return plan;
}

inline std::uint64_t resolve_budget(const RunConfig& c, const Network& net) {
  if (c.budget) return *c.budget;
  std::uint64_t total = 0;
  for (std::size_t p : block_param_counts(net)) total += p;
  return static_cast<std::uint64_t>(c.weight_bits) * total;
}

/// Every pack at the nominal width; objective and cost filled in for reporting.
inline BitAllocation uniform_allocation(const RunConfig& c, const Network& net, const PackPlan& plan,
                                        const SensitivityReport* sens) {
  AllocationProblem pr;
  pr.params = pack_param_counts(plan, block_param_counts(net));
  pr.omega.assign(plan.packs.size(), 0.0);
  if (sens)
    for (std::size_t j = 0; j < sens->size(); ++j) pr.omega[j] = (*sens)[j].omega;
  pr.candidates = {c.weight_bits};
  pr.budget = resolve_budget(c, net);
  return detail::finish(pr, std::vector<int>(plan.packs.size(), c.weight_bits));
}

inline BitAllocation mixed_allocation(const RunConfig& c, const Network& net, const PackPlan& plan, const SensitivityReport& sens) {
  const auto params = pack_param_counts(plan, block_param_counts(net));
  return allocate_bits(make_problem(sens, params, c.candidates, resolve_budget(c, net)));
}

/// Per-block quantization loss at the nominal width.
inline std::vector<double> block_quant_losses(const RunConfig& c, std::shared_ptr<const Network> net, const LabeledSet& calibration) {
  std::vector<double> out(net->block_count());
  parallel_for(out.size(), [&](std::size_t b) { out[b] = pack_quant_loss(net, calibration, b, c.weight_bits, c.calibration); });
  return out;
}

inline QuantSpec quant_spec(const RunConfig& c, std::vector<int> block_bits) {
  return QuantSpec{std::move(block_bits), c.activation_bits, c.edge_bits};
}

// ---------------------------------------------------------------------------
// Session: lazily computed stage artifacts for one run

class Session {
 public:
  explicit Session(RunConfig cfg) : cfg_(std::move(cfg)) {}

  const RunConfig& config() const { return cfg_; }
  const json& timing() const { return timing_; }
  const std::string& failed_stage() const { return failed_stage_; }

  std::shared_ptr<const Network> network() {
    if (!net_) {
      Stage s(*this, "load_model");
      if (cfg_.model.empty() && cfg_.quantized_model_path.empty()) throw ConfigError("config: model path is not set");
      if (!cfg_.model.empty()) net_ = std::make_shared<const Network>(load_model(cfg_.model));
      if (!cfg_.quantized_model_path.empty()) {
        QuantizedNetwork q = quantized_model_from_json(read_existing(cfg_.quantized_model_path));
        if (net_ && model_to_json(*net_)["blocks"] != model_to_json(q.network())["blocks"]) {
          throw ConfigError("inputs.quantized_model was not built from '" + cfg_.model + "'");
        }
        if (!net_) net_ = q.network_ptr();
        loaded_q_ = std::move(q);
      }
    }
    return net_;
  }

  const Dataset& dataset() {
    if (!data_) {
      Stage s(*this, "dataset");
      data_ = generate_dataset(cfg_.dataset, cfg_.dataset_n, cfg_.dataset_seed, cfg_.test_n);
      if (data_->spec.input_shape() != network()->input_shape) {
        throw ConfigError("dataset input shape " + to_string(data_->spec.input_shape()) + " does not match model input " +
                          to_string(network()->input_shape));
      }
    }
    return *data_;
  }

  const BlockScoreReport& scores() {
    if (!scores_) {
      if (!cfg_.scores_path.empty()) {
        Stage s(*this, "load_scores");
        scores_ = scores_from_json(read_existing(cfg_.scores_path));
      } else {
        const Dataset& ds = dataset();
        Stage s(*this, "score");
        scores_ = score_all_blocks(*network(), ds.calibration, cfg_.scoring);
      }
      if (scores_->size() != network()->block_count()) throw ConfigError("score report does not match the model's block count");
    }
    return *scores_;
  }

  const PackPlan& plan() {
    if (!plan_) {
      if (!cfg_.plan_path.empty()) {
        Stage s(*this, "load_plan");
        plan_ = plan_from_json(read_existing(cfg_.plan_path));
        if (plan_->block_count() != network()->block_count()) throw ConfigError("pack plan does not match the model's block count");
      } else {
        const std::vector<double> s = scores_of(scores());
        Stage st(*this, "pack");
        plan_ = make_plan(cfg_.strategy, s, cfg_.seed, cfg_.fixed_size, cfg_.max_pack_size, cfg_.random_packs);
      }
    }
    return *plan_;
  }

  const std::vector<double>& quant_losses() {
    if (!quant_losses_) {
      const Dataset& ds = dataset();
      Stage s(*this, "quant_loss");
      quant_losses_ = block_quant_losses(cfg_, network(), ds.calibration);
    }
    return *quant_losses_;
  }

  const SensitivityReport& sensitivities() {
    if (!sens_) {
      const PackPlan& p = plan();
      const std::vector<double> s = scores_of(scores());
      const std::vector<double>& l = quant_losses();
      sens_ = compute_sensitivities(p, s, l);
    }
    return *sens_;
  }

  const BitAllocation& allocation() {
    if (!alloc_) {
      if (!cfg_.allocation_path.empty()) {
        Stage s(*this, "load_allocation");
        alloc_ = allocation_from_json(read_existing(cfg_.allocation_path));
        if (alloc_->bits.size() != plan().packs.size()) throw ConfigError("allocation does not match the pack plan");
      } else if (cfg_.mixed_precision) {
        const SensitivityReport& sens = sensitivities();
        Stage s(*this, "allocate");
        alloc_ = mixed_allocation(cfg_, *network(), plan(), sens);
      } else {
        alloc_ = uniform_allocation(cfg_, *network(), plan(), nullptr);
      }
    }
    return *alloc_;
  }

  /// MinMax-calibrated model (or the one supplied through inputs.quantized_model).
  const QuantizedNetwork& quantized() {
    if (!minmax_) {
      network();
      if (loaded_q_) {
        minmax_ = *loaded_q_;
      } else {
        std::vector<int> bits = cfg_.mixed_precision || !cfg_.allocation_path.empty()
                                    ? block_bits(plan(), allocation())
                                    : std::vector<int>(network()->block_count(), cfg_.weight_bits);
        const Dataset& ds = dataset();
        Stage s(*this, "quantize");
        minmax_ = quantize_network(network(), quant_spec(cfg_, std::move(bits)), ds.calibration.inputs, cfg_.calibration);
      }
    }
    return *minmax_;
  }

  const ReconstructionResult& reconstructed() {
    if (!rec_) {
      const QuantizedNetwork& q = quantized();
      const PackPlan& p = plan();
      const Dataset& ds = dataset();
      Stage s(*this, "reconstruct");
      if (cfg_.reconstruct) {
        rec_ = reconstruct_network(q, p, ds.calibration, cfg_.reconstruction);
      } else {
        rec_ = ReconstructionResult{q, {}};
      }
      json packs = json::array();
      for (const PackTrace& t : rec_->traces) packs.push_back(t.seconds);
      timing_["reconstruct_packs"] = std::move(packs);
    }
    return *rec_;
  }

  const AccuracyReport& fp_accuracy() {
    if (!fp_acc_) {
      const Dataset& ds = dataset();
      Stage s(*this, "evaluate_fp");
      fp_acc_ = evaluate_model(*network(), ds.test);
    }
    return *fp_acc_;
  }

  AccuracyReport accuracy_of(const QuantizedNetwork& q) {
    const Dataset& ds = dataset();
    Stage s(*this, "evaluate");
    return evaluate_model(q.network(), ds.test, q);
  }

 private:
  /// Times a stage and remembers the innermost one that raised.
  class Stage {
   public:
    Stage(Session& s, std::string name)
        : s_(s), name_(std::move(name)), start_(std::chrono::steady_clock::now()), exceptions_(std::uncaught_exceptions()) {}
    ~Stage() {
      if (std::uncaught_exceptions() > exceptions_) {
        if (s_.failed_stage_.empty()) s_.failed_stage_ = name_;
        return;
      }
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
      s_.timing_[name_] = s_.timing_.value(name_, 0.0) + sec;
    }
    Stage(const Stage&) = delete;
    Stage& operator=(const Stage&) = delete;

   private:
    Session& s_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
    int exceptions_;
  };

  static json read_existing(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("input file not found: '" + path + "'");
    return read_json_file(path);
  }

  RunConfig cfg_;
  json timing_ = json::object();
  std::string failed_stage_;
  std::shared_ptr<const Network> net_;
  std::optional<QuantizedNetwork> loaded_q_;
  std::optional<Dataset> data_;
  std::optional<BlockScoreReport> scores_;
  std::optional<PackPlan> plan_;
  std::optional<std::vector<double>> quant_losses_;
  std::optional<SensitivityReport> sens_;
  std::optional<BitAllocation> alloc_;
  std::optional<QuantizedNetwork> minmax_;
  std::optional<ReconstructionResult> rec_;
  std::optional<AccuracyReport> fp_acc_;
};

// ---------------------------------------------------------------------------
// Reports

inline json sensitivities_to_json(const SensitivityReport& r) {
  json a = json::array();
  for (const PackSensitivity& s : r) {
    a.push_back(json{{"range", range_json(s.range)}, {"omega", s.omega}, {"scores", s.scores}, {"quant_losses", s.quant_losses}});
  }
  return a;
}

inline json report_header(const RunConfig& c, const char* kind) {
  return json{{"format", std::string("packptq-") + kind},
              {"versions", json{{"packptq", kVersion}, {"config", kConfigVersion}}},
              {"seed", c.seed},
              {"config", c.document}};
}

/// Drops wall-clock fields so reports from separate runs can be compared.
inline json strip_timing(json doc) {
  if (doc.is_object()) {
    doc.erase("timing");
    for (auto& [k, v] : doc.items()) v = strip_timing(v);
  } else if (doc.is_array()) {
    for (auto& v : doc) v = strip_timing(v);
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Commands. Each writes its artifacts under cfg.out and returns the main document.

inline json cmd_score(Session& s) {
  json doc = scores_to_json(s.scores());
  write_json_file(s.config().out / "scores.json", doc);
  return doc;
}

inline json cmd_pack(Session& s) {
  json doc = plan_to_json(s.plan());
  write_json_file(s.config().out / "plan.json", doc);
  return doc;
}

inline json cmd_allocate(Session& s) {
  const SensitivityReport* sens = s.config().mixed_precision && s.config().allocation_path.empty() ? &s.sensitivities() : nullptr;
  json doc = allocation_to_json(s.allocation(), s.plan(), sens);
  write_json_file(s.config().out / "allocation.json", doc);
  return doc;
}

inline json cmd_quantize(Session& s) {
  json doc = quantized_model_to_json(s.quantized());
  write_json_file(s.config().out / "quantized_model.json", doc);
  return doc;
}

inline json cmd_reconstruct(Session& s) {
  const ReconstructionResult& r = s.reconstructed();
  json traces = json::array();
  for (const PackTrace& t : r.traces) traces.push_back(trace_to_json(t, true));
  write_json_file(s.config().out / "traces.json", traces);
  json doc = quantized_model_to_json(r.model);
  write_json_file(s.config().out / "quantized_model.json", doc);
  return doc;
}

inline json cmd_eval(Session& s) {
  json doc = report_header(s.config(), "eval");
  doc["full_precision"] = accuracy_to_json(s.fp_accuracy());
  if (!s.config().quantized_model_path.empty()) {
    const QuantizedNetwork& q = s.quantized();
    doc["quantized"] = accuracy_to_json(s.accuracy_of(q));
    doc["average_bits"] = q.average_block_weight_bits();
  }
  write_json_file(s.config().out / "eval.json", doc);
  return doc;
}

/// score, pack, allocate, quantize, reconstruct, evaluate, report.
inline json cmd_pipeline(Session& s) {
  const RunConfig& c = s.config();
  json doc = report_header(c, "run-report");
  doc["scores"] = scores_to_json(s.scores());
  doc["plan"] = plan_to_json(s.plan());
  if (c.mixed_precision && c.allocation_path.empty()) doc["sensitivities"] = sensitivities_to_json(s.sensitivities());
  doc["allocation"] = allocation_to_json(s.allocation(), s.plan());
  const QuantizedNetwork& minmax = s.quantized();
  const ReconstructionResult& rec = s.reconstructed();
  json traces = json::array();
  for (const PackTrace& t : rec.traces) traces.push_back(trace_to_json(t, false));
  doc["traces"] = std::move(traces);
  doc["accuracy"] = json{{"full_precision", accuracy_to_json(s.fp_accuracy())},
                         {"minmax", accuracy_to_json(s.accuracy_of(minmax))},
                         {"quantized", accuracy_to_json(s.accuracy_of(rec.model))}};
  doc["average_bits"] = rec.model.average_block_weight_bits();
  doc["budget"] = json{{"C", s.allocation().budget}, {"cost", s.allocation().cost}};
  doc["timing"] = s.timing();
  write_json_file(c.out / "quantized_model.json", quantized_model_to_json(rec.model));
  write_json_file(c.out / "report.json", doc);
  return doc;
}

inline json cmd_gen_data(const RunConfig& c) {
  const Dataset ds = generate_dataset(c.dataset, c.dataset_n, c.dataset_seed, c.test_n);
  json doc = dataset_to_json(ds);
  write_json_file(c.out / "dataset.json", doc);
  return doc;
}

/// Builds and trains a network on a draw disjoint from calibration and test data.
inline json cmd_gen_model(const RunConfig& c) {
  const Dataset train = generate_dataset(c.dataset, c.train_n, c.train_data_seed);
  const Dataset eval = generate_dataset(c.dataset, c.dataset_n, c.dataset_seed, c.test_n);
  Network net = build_model(c.train_arch, c.dataset.input_shape(), c.dataset.classes, c.init_seed);
  const TrainResult r = train_model(net, train.calibration, c.train);
  if (!r.reached_target) {
    throw NumericalError("gen-model: training accuracy " + std::to_string(r.train_accuracy) + " below target " +
                         std::to_string(c.train.target_accuracy) + " after " + std::to_string(r.epochs_run) + " epochs");
  }
  const AccuracyReport test = evaluate_model(net, eval.test);
  net.metadata["dataset"] = c.dataset.kind;
  net.metadata["train_accuracy"] = std::to_string(r.train_accuracy);
  net.metadata["test_accuracy"] = std::to_string(test.top1);
  net.metadata["epochs"] = std::to_string(r.epochs_run);
  net.metadata["train_data_seed"] = std::to_string(c.train_data_seed);
  json doc = model_to_json(net);
  write_json_file(c.out / "model.json", doc);
  return doc;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
  std::string id;
  bool minmax_only = false;  // no reconstruction
  PackStrategy strategy = PackStrategy::hada;
  std::size_t fixed_size = 0;
  bool mixed = false;
};

/// "<strategy>/<precision>" where strategy is none, random, hada, fixed(N) or
/// minmax (no reconstruction) and precision is uniform or mp.
inline AblationCell parse_cell(const std::string& id) {
  const auto slash = id.find('/');
  if (slash == std::string::npos) throw ConfigError("ablation cell '" + id + "' is not <strategy>/<uniform|mp>");
  AblationCell c;
  c.id = id;
  const std::string strat = id.substr(0, slash);
  const std::string prec = id.substr(slash + 1);
  if (prec == "mp") c.mixed = true;
  else if (prec != "uniform") throw ConfigError("ablation cell '" + id + "': precision must be uniform or mp");
  if (strat == "minmax") {
    c.minmax_only = true;
    c.strategy = PackStrategy::hada;
  } else if (strat.rfind("fixed(", 0) == 0 && strat.back() == ')') {
    c.strategy = PackStrategy::fixed;
    try {
      c.fixed_size = std::stoul(strat.substr(6, strat.size() - 7));
    } catch (const std::exception&) {
      throw ConfigError("ablation cell '" + id + "': bad fixed pack size");
    }
    if (c.fixed_size == 0) throw ConfigError("ablation cell '" + id + "': fixed pack size must be >= 1");
  } else {
    c.strategy = parse_strategy(strat);
    if (c.strategy == PackStrategy::fixed) throw ConfigError("ablation cell '" + id + "': write fixed(N)");
  }
  return c;
}

struct CellRun {
  std::optional<double> accuracy;
  double average_bits = 0.0;
  std::size_t packs = 0;
  std::string error;
};

struct AblationRow {
  AblationCell cell;
  std::vector<CellRun> runs;  // one per seed

  std::optional<double> median() const {
    std::vector<double> v;
    for (const CellRun& r : runs)
      if (r.accuracy) v.push_back(*r.accuracy);
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }
  std::optional<double> mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const CellRun& r : runs)
      if (r.accuracy) s += *r.accuracy, ++n;
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  }
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  double fp_accuracy = 0.0;
  std::vector<AblationRow> rows;
  double seconds = 0.0;

  const AblationRow& row(const std::string& id) const {
    for (const AblationRow& r : rows)
      if (r.cell.id == id) return r;
    throw ConfigError("ablation has no cell '" + id + "'");
  }
};

/// Runs every cell for every seed. Seeds are shared across cells; a failing
/// cell records its error and the others continue.
inline AblationResult run_ablation(const RunConfig& c) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<AblationCell> cells;
  for (const std::string& id : c.ablation_cells) cells.push_back(parse_cell(id));

  auto net = std::make_shared<const Network>(load_model(c.model));
  const Dataset ds = generate_dataset(c.dataset, c.dataset_n, c.dataset_seed, c.test_n);
  if (ds.spec.input_shape() != net->input_shape) throw ConfigError("dataset input shape does not match the model");

  AblationResult result;
  result.seeds = c.ablation_seeds;
  result.fp_accuracy = evaluate_model(*net, ds.test).top1;

  // Shared per-seed state: block scores; per-run state: block quantization losses.
  std::vector<std::vector<double>> scores(c.ablation_seeds.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    PerturbationConfig pc = c.scoring;
    pc.seed = c.ablation_seeds[i];
    scores[i] = scores_of(score_all_blocks(*net, ds.calibration, pc));
  }
  const bool any_mixed = std::any_of(cells.begin(), cells.end(), [](const AblationCell& x) { return x.mixed; });
  const std::vector<double> losses = any_mixed ? block_quant_losses(c, net, ds.calibration) : std::vector<double>{};

  for (const AblationCell& cell : cells) result.rows.push_back(AblationRow{cell, std::vector<CellRun>(c.ablation_seeds.size())});
  const std::size_t seeds = c.ablation_seeds.size();
  parallel_for(cells.size() * seeds, [&](std::size_t task) {
    const AblationCell& cell = cells[task / seeds];
    const std::size_t si = task % seeds;
    const std::uint64_t seed = c.ablation_seeds[si];
    CellRun& run = result.rows[task / seeds].runs[si];
    try {
      const PackPlan plan = make_plan(cell.strategy, scores[si], seed, cell.fixed_size ? cell.fixed_size : c.fixed_size,
                                      c.max_pack_size, c.random_packs);
      std::vector<int> bits(net->block_count(), c.weight_bits);
      if (cell.mixed) {
        const SensitivityReport sens = compute_sensitivities(plan, scores[si], losses);
        bits = block_bits(plan, mixed_allocation(c, *net, plan, sens));
      }
      QuantizedNetwork q = quantize_network(net, quant_spec(c, bits), ds.calibration.inputs, c.calibration);
      if (!cell.minmax_only) {
        ReconstructionConfig rc = c.reconstruction;
        rc.seed = seed;
        q = reconstruct_network(std::move(q), plan, ds.calibration, rc).model;
      }
      run.accuracy = evaluate_model(*net, ds.test, q).top1;
      run.average_bits = q.average_block_weight_bits();
      run.packs = plan.packs.size();
    } catch (const std::exception& e) {
      run.error = e.what();
    }
  });
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline json ablation_to_json(const RunConfig& c, const AblationResult& r) {
  json doc = report_header(c, "ablation");
  doc["seeds"] = r.seeds;
  doc["full_precision_accuracy"] = r.fp_accuracy;
  json rows = json::array();
  for (const AblationRow& row : r.rows) {
    json runs = json::array();
    for (std::size_t i = 0; i < row.runs.size(); ++i) {
      const CellRun& run = row.runs[i];
      json j{{"seed", r.seeds[i]}};
      j["accuracy"] = run.accuracy ? json(*run.accuracy) : json(nullptr);
      j["average_bits"] = run.average_bits;
      j["packs"] = run.packs;
      j["error"] = run.error.empty() ? json(nullptr) : json(run.error);
      runs.push_back(std::move(j));
    }
    const auto med = row.median();
    const auto mean = row.mean();
    rows.push_back(json{{"cell", row.cell.id},
                        {"runs", std::move(runs)},
                        {"median", med ? json(*med) : json(nullptr)},
                        {"mean", mean ? json(*mean) : json(nullptr)}});
  }
  doc["rows"] = std::move(rows);
  doc["timing"] = json{{"total", r.seconds}};
  return doc;
}

inline std::string format_number(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

/// One row per cell with per-seed accuracies, median and mean.
inline std::string ablation_table_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "cell,strategy,precision";
  for (std::uint64_t s : r.seeds) os << ",seed_" << s;
  os << ",median,mean\n";
  for (const AblationRow& row : r.rows) {
    const std::string& id = row.cell.id;
    os << id << ',' << id.substr(0, id.find('/')) << ',' << id.substr(id.find('/') + 1);
    for (const CellRun& run : row.runs) os << ',' << format_number(run.accuracy);
    os << ',' << format_number(row.median()) << ',' << format_number(row.mean()) << '\n';
  }
  return os.str();
}

/// Long-format accuracy per (cell, seed) for external plotting.
inline std::string ablation_plot_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "cell,seed,accuracy,average_bits\n";
  for (const AblationRow& row : r.rows)
    for (std::size_t i = 0; i < row.runs.size(); ++i) {
      os << row.cell.id << ',' << r.seeds[i] << ',' << format_number(row.runs[i].accuracy) << ','
         << format_number(row.runs[i].average_bits) << '\n';
    }
  return os.str();
}

inline json cmd_ablate(const RunConfig& c) {
  const AblationResult r = run_ablation(c);
  json doc = ablation_to_json(c, r);
  write_json_file(c.out / "ablation.json", doc);
  write_text_file(c.out / "ablation.csv", ablation_table_csv(r));
  write_text_file(c.out / "ablation_plot.csv", ablation_plot_csv(r));
  return doc;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"score", "pack",     "allocate", "quantize", "reconstruct",
                                              "eval",  "pipeline", "ablate",   "gen-data", "gen-model"};
  return names;
}

/// Runs one subcommand. On failure a `FAILED.json` marker naming the stage is
/// written next to whatever artifacts were already produced, then the error
/// is rethrown.
inline json run_command(const std::string& name, const RunConfig& cfg) {
  if (name == "gen-data") return cmd_gen_data(cfg);
  if (name == "gen-model") return cmd_gen_model(cfg);
  if (name == "ablate") return cmd_ablate(cfg);
  Session s(cfg);
  try {
    if (name == "score") return cmd_score(s);
    if (name == "pack") return cmd_pack(s);
    if (name == "allocate") return cmd_allocate(s);
    if (name == "quantize") return cmd_quantize(s);
    if (name == "reconstruct") return cmd_reconstruct(s);
    if (name == "eval") return cmd_eval(s);
    if (name == "pipeline") return cmd_pipeline(s);
  } catch (const std::exception& e) {
    try {
      write_json_file(cfg.out / "FAILED.json",
                      json{{"command", name}, {"stage", s.failed_stage().empty() ? name : s.failed_stage()}, {"error", e.what()}});
    } catch (const std::exception&) {
    }
    throw;
  }
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace packptq
