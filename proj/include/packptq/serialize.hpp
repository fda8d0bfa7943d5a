#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "packptq/allocator.hpp"
#include "packptq/dataset.hpp"
#include "packptq/evaluate.hpp"
#include "packptq/importance.hpp"
#include "packptq/model.hpp"
#include "packptq/packer.hpp"
#include "packptq/qnetwork.hpp"
#include "packptq/reconstruct.hpp"

namespace packptq {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Files

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_json_file(const std::filesystem::path& path, const json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Exact float encoding

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const json& node, const std::string& path) {
  if (!node.is_string()) throw SchemaError(path, "expected a hex-float string");
  const std::string& s = node.get_ref<const std::string&>();
  if (s.empty()) throw SchemaError(path, "empty number");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
    throw SchemaError(path, "'" + s + "' is not a finite float");
  }
  return v;
}

inline json hex_array(std::span<const double> values) {
  json a = json::array();
  for (double v : values) a.push_back(hex_double(v));
  return a;
}

inline std::vector<double> parse_hex_array(const json& node, const std::string& path) {
  if (!node.is_array()) throw SchemaError(path, "expected an array");
  std::vector<double> out;
  out.reserve(node.size());
  for (std::size_t i = 0; i < node.size(); ++i) out.push_back(parse_hex_double(node[i], path + "/" + std::to_string(i)));
  return out;
}

namespace detail {

inline const json& member(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(path + "/" + key, "missing");
  return *it;
}

inline std::string string_member(const json& obj, const char* key, const std::string& path) {
  const json& v = member(obj, key, path);
  if (!v.is_string()) throw SchemaError(path + "/" + key, "expected a string");
  return v.get<std::string>();
}

inline long long int_member(const json& obj, const char* key, const std::string& path) {
  const json& v = member(obj, key, path);
  if (!v.is_number_integer()) throw SchemaError(path + "/" + key, "expected an integer");
  return v.get<long long>();
}

inline Shape parse_shape(const json& node, const std::string& path) {
  if (!node.is_array() || node.empty()) throw SchemaError(path, "expected a non-empty array of dimensions");
  Shape s;
  for (std::size_t i = 0; i < node.size(); ++i) {
    const std::string p = path + "/" + std::to_string(i);
    if (!node[i].is_number_integer()) throw SchemaError(p, "dimension must be an integer");
    const long long d = node[i].get<long long>();
    if (d <= 0) throw SchemaError(p, "dimension must be positive, got " + std::to_string(d));
    s.push_back(static_cast<std::size_t>(d));
  }
  return s;
}

inline json shape_json(const Shape& s) {
  json a = json::array();
  for (std::size_t d : s) a.push_back(d);
  return a;
}

inline json layer_json(const Layer& l) {
  return json{{"kind", to_string(l.kind)},
              {"shape", shape_json(l.weight.shape())},
              {"weights", hex_array(l.weight.data())},
              {"bias", hex_array(l.bias.data())}};
}

inline Layer parse_layer(const json& node, const std::string& path, const std::string& owner) {
  try {
    Layer l;
    const std::string kind = string_member(node, "kind", path);
    if (kind == "linear") l.kind = LayerKind::linear;
    else if (kind == "conv2d") l.kind = LayerKind::conv2d;
    else throw SchemaError(path + "/kind", "unknown layer kind '" + kind + "'");
    const Shape shape = parse_shape(member(node, "shape", path), path + "/shape");
    const std::size_t rank = l.kind == LayerKind::linear ? 2 : 4;
    if (shape.size() != rank) throw SchemaError(path + "/shape", kind + " weights need rank " + std::to_string(rank));
    auto w = parse_hex_array(member(node, "weights", path), path + "/weights");
    if (w.size() != shape_numel(shape)) {
      throw SchemaError(path + "/weights", "expected " + std::to_string(shape_numel(shape)) + " values, got " +
                                               std::to_string(w.size()));
    }
    l.weight = Tensor(shape, std::move(w));
    auto b = parse_hex_array(member(node, "bias", path), path + "/bias");
    if (b.size() != l.out_channels()) throw SchemaError(path + "/bias", "expected " + std::to_string(l.out_channels()) + " values");
    const std::size_t nb = b.size();
    l.bias = Tensor(Shape{nb}, std::move(b));
    return l;
  } catch (const SchemaError& e) {
    if (owner.empty()) throw;
    throw SchemaError(e.path(), std::string(e.what()).substr(e.path().size() + 2) + " (" + owner + ")");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model document

inline json model_to_json(const Network& net) {
  json blocks = json::array();
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const Block& blk = net.blocks[b];
    blocks.push_back(json{{"index", b + 1},
                          {"kind", to_string(blk.kind)},
                          {"residual", blk.residual},
                          {"param_count", blk.param_count()},
                          {"layers", json::array({detail::layer_json(blk.first), detail::layer_json(blk.second)})}});
  }
  json meta = json::object();
  for (const auto& [k, v] : net.metadata) meta[k] = v;
  return json{{"format", "packptq-model"},
              {"version", 1},
              {"name", net.name},
              {"input_shape", detail::shape_json(net.input_shape)},
              {"class_count", net.class_count},
              {"stem", detail::layer_json(net.stem)},
              {"blocks", std::move(blocks)},
              {"head", detail::layer_json(net.head)},
              {"metadata", std::move(meta)}};
}

inline Network model_from_json(const json& doc) {
  const std::string root;
  Network net;
  net.name = detail::string_member(doc, "name", root);
  net.input_shape = detail::parse_shape(detail::member(doc, "input_shape", root), "/input_shape");
  const long long classes = detail::int_member(doc, "class_count", root);
  if (classes < 2) throw SchemaError("/class_count", "must be >= 2");
  net.class_count = static_cast<std::size_t>(classes);
  net.stem = detail::parse_layer(detail::member(doc, "stem", root), "/stem", "stem");
  const json& blocks = detail::member(doc, "blocks", root);
  if (!blocks.is_array() || blocks.size() < 2) throw SchemaError("/blocks", "expected an array of at least 2 blocks");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string path = "/blocks/" + std::to_string(b);
    const std::string owner = "block " + std::to_string(b + 1);
    Block blk;
    const std::string kind = detail::string_member(blocks[b], "kind", path);
    if (kind == "mlp") blk.kind = BlockKind::mlp;
    else if (kind == "conv") blk.kind = BlockKind::conv;
    else throw SchemaError(path + "/kind", "unknown block kind '" + kind + "' (" + owner + ")");
    const json& residual = detail::member(blocks[b], "residual", path);
    if (!residual.is_boolean()) throw SchemaError(path + "/residual", "expected a boolean (" + owner + ")");
    blk.residual = residual.get<bool>();
    const json& layers = detail::member(blocks[b], "layers", path);
    if (!layers.is_array() || layers.size() != 2) throw SchemaError(path + "/layers", "expected exactly 2 layers (" + owner + ")");
    blk.first = detail::parse_layer(layers[0], path + "/layers/0", owner);
    blk.second = detail::parse_layer(layers[1], path + "/layers/1", owner);
    net.blocks.push_back(std::move(blk));
  }
  net.head = detail::parse_layer(detail::member(doc, "head", root), "/head", "head");
  if (auto it = doc.find("metadata"); it != doc.end() && it->is_object()) {
    for (const auto& [k, v] : it->items()) net.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
  try {
    validate_network(net);
  } catch (const ShapeError& e) {
    throw SchemaError("", e.what());
  }
  return net;
}

inline Network load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("model file not found: '" + path.string() + "'");
  return model_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Dataset document

inline json labeled_set_json(const LabeledSet& s) {
  return json{{"inputs", s.inputs.values()}, {"labels", s.labels}};
}

inline json dataset_to_json(const Dataset& ds) {
  return json{{"format", "packptq-dataset"},
              {"version", 1},
              {"kind", ds.spec.kind},
              {"N", ds.n},
              {"seed", ds.seed},
              {"class_count", ds.spec.classes},
              {"dim", ds.spec.dim},
              {"image", ds.spec.image},
              {"input_shape", detail::shape_json(ds.spec.input_shape())},
              {"calibration", labeled_set_json(ds.calibration)},
              {"test", labeled_set_json(ds.test)}};
}

inline LabeledSet labeled_set_from_json(const json& node, const std::string& path, const Shape& input_shape,
                                        std::size_t classes) {
  const json& labels = detail::member(node, "labels", path);
  const json& inputs = detail::member(node, "inputs", path);
  if (!labels.is_array() || !inputs.is_array()) throw SchemaError(path, "inputs and labels must be arrays");
  LabeledSet s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].is_number_integer()) throw SchemaError(path + "/labels/" + std::to_string(i), "expected an integer");
    const int y = labels[i].get<int>();
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw SchemaError(path + "/labels/" + std::to_string(i), "label out of range");
    s.labels.push_back(y);
  }
  std::vector<double> values;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].is_number()) throw SchemaError(path + "/inputs/" + std::to_string(i), "expected a number");
    values.push_back(inputs[i].get<double>());
  }
  Shape shape{s.labels.size()};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  if (values.size() != shape_numel(shape)) throw SchemaError(path + "/inputs", "length does not match labels x input_shape");
  s.inputs = Tensor(shape, std::move(values));
  return s;
}

inline Dataset dataset_from_json(const json& doc) {
  Dataset ds;
  ds.spec.kind = detail::string_member(doc, "kind", "");
  ds.spec.classes = static_cast<std::size_t>(detail::int_member(doc, "class_count", ""));
  ds.spec.dim = static_cast<std::size_t>(detail::int_member(doc, "dim", ""));
  ds.spec.image = doc.value("image", false);
  ds.n = static_cast<std::size_t>(detail::int_member(doc, "N", ""));
  ds.seed = static_cast<std::uint64_t>(detail::int_member(doc, "seed", ""));
  const Shape in = ds.spec.input_shape();
  ds.calibration = labeled_set_from_json(detail::member(doc, "calibration", ""), "/calibration", in, ds.spec.classes);
  ds.test = labeled_set_from_json(detail::member(doc, "test", ""), "/test", in, ds.spec.classes);
  return ds;
}

// ---------------------------------------------------------------------------
// Quantized-model document

inline json quant_params_json(const std::string& site, const QuantParams& p) {
  json j{{"site_id", site}, {"k", p.bits}, {"per_channel", p.per_channel}, {"axis", p.axis}};
  j["s"] = p.bypass() ? json::array() : hex_array(p.scale);
  j["z0"] = p.bypass() ? json::array() : hex_array(p.zero_point);
  j["offsets"] = p.rounding_offsets ? hex_array(p.rounding_offsets->data()) : json(nullptr);
  return j;
}

inline json quantized_model_to_json(const QuantizedNetwork& q) {
  json sites = json::array();
  for (const SiteKey& k : q.sites()) sites.push_back(quant_params_json(k.str(), q.params(k)));
  return json{{"format", "packptq-quantized-model"},
              {"version", 1},
              {"model", model_to_json(q.network())},
              {"sites", std::move(sites)}};
}

inline QuantizedNetwork quantized_model_from_json(const json& doc) {
  auto net = std::make_shared<const Network>(model_from_json(detail::member(doc, "model", "")));
  // Start from a bypassed network and overwrite every listed site.
  QuantizedNetwork q(net, QuantParams::bypassed(), std::vector<BlockQuant>(net->block_count()), QuantParams::bypassed(),
                     QuantParams::bypassed());
  std::map<std::string, SiteKey> by_name;
  for (const SiteKey& k : q.sites()) by_name.emplace(k.str(), k);
  const json& sites = detail::member(doc, "sites", "");
  if (!sites.is_array()) throw SchemaError("/sites", "expected an array");
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const std::string path = "/sites/" + std::to_string(i);
    const std::string id = detail::string_member(sites[i], "site_id", path);
    auto it = by_name.find(id);
    if (it == by_name.end()) throw SchemaError(path + "/site_id", "unknown site '" + id + "'");
    QuantParams p;
    p.bits = static_cast<int>(detail::int_member(sites[i], "k", path));
    p.per_channel = sites[i].value("per_channel", false);
    p.axis = sites[i].value("axis", std::size_t{0});
    if (!p.bypass()) {
      p.scale = parse_hex_array(detail::member(sites[i], "s", path), path + "/s");
      p.zero_point = parse_hex_array(detail::member(sites[i], "z0", path), path + "/z0");
    }
    const json& off = detail::member(sites[i], "offsets", path);
    if (!off.is_null()) {
      const SiteKey& k = it->second;
      const Layer& l = k.part == SitePart::stem   ? net->stem
                       : k.part == SitePart::head ? net->head
                       : k.layer == 1             ? net->blocks[k.block].first
                                                  : net->blocks[k.block].second;
      p.rounding_offsets = Tensor(l.weight.shape(), parse_hex_array(off, path + "/offsets"));
    }
    try {
      p.validate();
    } catch (const ConfigError& e) {
      throw SchemaError(path, e.what());
    }
    q.params(it->second) = std::move(p);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Stage artifacts

inline json scores_to_json(const BlockScoreReport& r) {
  json a = json::array();
  for (const BlockScore& s : r) {
    a.push_back(json{{"block", s.block + 1},
                     {"score", s.score},
                     {"numerator", s.numerator},
                     {"denominator", s.denominator},
                     {"stderr", s.stderr_numerator},
                     {"score_stderr", s.stderr_score},
                     {"n", s.n},
                     {"sigma", s.sigma},
                     {"samples", s.samples}});
  }
  return a;
}

inline BlockScoreReport scores_from_json(const json& doc) {
  if (!doc.is_array()) throw SchemaError("", "score report must be an array");
  BlockScoreReport r;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string path = "/" + std::to_string(i);
    BlockScore s;
    s.block = static_cast<std::size_t>(detail::int_member(doc[i], "block", path) - 1);
    if (s.block != i) throw SchemaError(path + "/block", "entries must be in block order");
    const json& score = detail::member(doc[i], "score", path);
    if (!score.is_number()) throw SchemaError(path + "/score", "expected a number");
    s.score = score.get<double>();
    s.numerator = doc[i].value("numerator", 0.0);
    s.denominator = doc[i].value("denominator", 0.0);
    s.stderr_numerator = doc[i].value("stderr", 0.0);
    s.stderr_score = doc[i].value("score_stderr", 0.0);
    s.n = doc[i].value("n", std::size_t{0});
    s.sigma = doc[i].value("sigma", 0.0);
    s.samples = doc[i].value("samples", std::size_t{0});
    r.push_back(s);
  }
  return r;
}

inline json range_json(const PackRange& r) { return json::array({r.first + 1, r.last + 1}); }

inline json plan_to_json(const PackPlan& p) {
  json packs = json::array();
  for (const PackRange& r : p.packs) packs.push_back(range_json(r));
  json j{{"strategy", to_string(p.strategy)}, {"packs", std::move(packs)}, {"scores", p.scores}};
  if (p.strategy == PackStrategy::random) j["seed"] = p.seed;
  if (p.strategy == PackStrategy::fixed) j["size"] = p.fixed_size;
  j["max_pack_size"] = p.max_pack_size;
  j["capped"] = p.capped;
  return j;
}

inline PackPlan plan_from_json(const json& doc) {
  PackPlan p;
  p.strategy = parse_strategy(detail::string_member(doc, "strategy", ""));
  const json& packs = detail::member(doc, "packs", "");
  if (!packs.is_array()) throw SchemaError("/packs", "expected an array");
  for (std::size_t i = 0; i < packs.size(); ++i) {
    const json& r = packs[i];
    const std::string path = "/packs/" + std::to_string(i);
    if (!r.is_array() || r.size() != 2 || !r[0].is_number_integer() || !r[1].is_number_integer() || r[0].get<long long>() < 1) {
      throw SchemaError(path, "expected [first, last] with 1-based block indices");
    }
    p.packs.push_back({r[0].get<std::size_t>() - 1, r[1].get<std::size_t>() - 1});
  }
  if (!is_partition(p.packs, p.block_count())) throw SchemaError("/packs", "packs must be ascending, contiguous and start at block 1");
  if (auto it = doc.find("scores"); it != doc.end()) p.scores = it->get<std::vector<double>>();
  p.seed = doc.value("seed", std::uint64_t{0});
  p.fixed_size = doc.value("size", std::size_t{0});
  p.max_pack_size = doc.value("max_pack_size", std::size_t{0});
  p.capped = doc.value("capped", false);
  return p;
}

inline json allocation_to_json(const BitAllocation& a, const PackPlan& plan, const SensitivityReport* sens = nullptr) {
  json packs = json::array();
  for (std::size_t j = 0; j < a.bits.size(); ++j) {
    json e{{"range", range_json(plan.packs.at(j))}, {"omega", a.omega[j]}, {"p", a.params[j]}, {"bits", a.bits[j]}};
    if (sens) {
      e["scores"] = (*sens)[j].scores;
      e["quant_losses"] = (*sens)[j].quant_losses;
    }
    packs.push_back(std::move(e));
  }
  return json{{"K", a.candidates}, {"C", a.budget},          {"packs", std::move(packs)},
              {"objective", a.objective}, {"cost", a.cost}, {"avg_bits", a.average_bits()}};
}

inline BitAllocation allocation_from_json(const json& doc) {
  BitAllocation a;
  a.candidates = detail::member(doc, "K", "").get<std::vector<int>>();
  a.budget = detail::member(doc, "C", "").get<std::uint64_t>();
  const json& packs = detail::member(doc, "packs", "");
  if (!packs.is_array()) throw SchemaError("/packs", "expected an array");
  for (std::size_t j = 0; j < packs.size(); ++j) {
    const std::string path = "/packs/" + std::to_string(j);
    a.bits.push_back(static_cast<int>(detail::int_member(packs[j], "bits", path)));
    a.params.push_back(static_cast<std::uint64_t>(detail::int_member(packs[j], "p", path)));
    a.omega.push_back(detail::member(packs[j], "omega", path).get<double>());
  }
  a.objective = doc.value("objective", 0.0);
  a.cost = doc.value("cost", std::uint64_t{0});
  return a;
}

inline json trace_to_json(const PackTrace& t, bool include_timing) {
  json j{{"pack", range_json(t.pack)},
         {"initial_loss", t.initial_loss},
         {"final_loss", t.final_loss},
         {"curve", t.curve},
         {"seed", t.seed}};
  if (include_timing) j["seconds"] = t.seconds;
  return j;
}

inline json accuracy_to_json(const AccuracyReport& r) {
  return json{{"top1", r.top1}, {"mean_class_accuracy", r.mean_class_accuracy}, {"per_class", r.per_class}, {"samples", r.samples}};
}

}  // namespace packptq
