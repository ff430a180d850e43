#include "pmedit/facts.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>

#include <json.hpp>

#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

namespace {

constexpr std::uint64_t kContextTag = fnv1a64("facts.context");
constexpr std::uint64_t kKeyNoiseTag = fnv1a64("facts.key_noise");
constexpr std::uint64_t kObjectTag = fnv1a64("facts.objects");
constexpr std::uint64_t kParaphraseTag = fnv1a64("facts.paraphrase");
constexpr std::uint64_t kTargetTag = fnv1a64("facts.target");
constexpr std::uint64_t kFeatureTag = fnv1a64("facts.feature_map");

// --- base64 of raw little-endian f64 bytes ------------------------------

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back(kB64Alphabet[v & 63]);
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    unsigned v = bytes[i] << 16;
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.append("==");
  } else if (rem == 2) {
    unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  throw InputError(std::string("invalid base64 character '") + c + "'");
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw InputError("base64 length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    unsigned v = 0;
    for (int k = 0; k < 4; ++k) {
      char c = text[i + k];
      if (c == '=') {
        ++pad;
        v <<= 6;
      } else {
        if (pad > 0) throw InputError("base64 padding in the middle of input");
        v = (v << 6) | static_cast<unsigned>(b64_value(c));
      }
    }
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xFF));
    if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xFF));
  }
  return out;
}

std::string encode_vector(const Vector& v) {
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(v.size()) * 8);
  for (Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) {
      bytes.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFF));
    }
  }
  return base64_encode(bytes);
}

Vector decode_vector(const std::string& text) {
  const std::vector<unsigned char> bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw InputError("encoded vector byte count not a multiple of 8");
  Vector v(static_cast<Index>(bytes.size() / 8));
  for (Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + b]) << (8 * b);
    }
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

// --- tail evaluation for value solves ------------------------------------

struct TailTrace {
  std::vector<Vector> keys;  // map outputs above the edit layer
  Vector final_value;        // input to the readout
  Vector logits;
};

TailTrace tail_forward(const ToyModel& model, Index layer, const Vector& v) {
  TailTrace t;
  Vector h = v;
  for (Index l = layer + 1; l < model.layer_count(); ++l) {
    Vector key = model.map(l).apply(h);
    t.keys.push_back(key);
    h = model.layer_weight(l) * key;
  }
  t.final_value = h;
  t.logits = model.readout() * h;
  return t;
}

// Gradient of a scalar loss with respect to the edit-layer value, given the
// gradient at the logits.
Vector tail_backward(const ToyModel& model, Index layer, const TailTrace& t,
                     const Vector& grad_logits) {
  Vector dh = model.readout().transpose() * grad_logits;
  for (Index l = model.layer_count() - 1; l > layer; --l) {
    const Vector& key = t.keys[static_cast<std::size_t>(l - layer - 1)];
    Vector dkey = model.layer_weight(l).transpose() * dh;
    dh = model.map(l).backprop(key, dkey);
  }
  return dh;
}

struct ValueLossParts {
  double total = 0.0;
  Vector grad;
};

// Shared by value_loss / value_loss_gradient / solve_value so the three
// always agree.
ValueLossParts value_loss_eval(const ToyModel& model, Index layer,
                               const Vector& v_init, const Vector& probe_v,
                               const Vector& log_q0, Index new_object,
                               double kl_weight, const Vector& v,
                               bool want_grad) {
  ValueLossParts out;
  const TailTrace edit = tail_forward(model, layer, v);
  const Vector p = softmax(edit.logits);
  out.total = -std::log(std::max(p[new_object], 1e-300));
  if (want_grad) {
    Vector grad_logits = p;
    grad_logits[new_object] -= 1.0;
    out.grad = tail_backward(model, layer, edit, grad_logits);
  }

  if (kl_weight > 0.0) {
    const TailTrace probe = tail_forward(model, layer, probe_v + (v - v_init));
    const Vector q = softmax(probe.logits);
    Vector log_q = (q.array().max(1e-300)).log().matrix();
    const double kl = (q.array() * (log_q - log_q0).array()).sum();
    out.total += kl_weight * kl;
    if (want_grad) {
      // dKL/dz = q .* (log q - log q0 - KL)
      Vector grad_logits = q.cwiseProduct(log_q - log_q0 - Vector::Constant(q.size(), kl));
      out.grad += kl_weight * tail_backward(model, layer, probe, grad_logits);
    }
  }
  return out;
}

struct ProbeState {
  Vector v_init;
  Vector probe_v;
  Vector log_q0;
};

ProbeState probe_state(const ToyModel& model, Index layer, const Vector& k_e) {
  ProbeState s;
  if (k_e.size() != model.d_k()) throw DimensionError("edit key size != d_k");
  s.v_init = model.layer_weight(layer) * k_e;
  s.probe_v = model.layer_value(layer, model.probe_context());
  const Vector q0 = softmax(tail_forward(model, layer, s.probe_v).logits);
  s.log_q0 = (q0.array().max(1e-300)).log().matrix();
  return s;
}

Index draw_distinct_object(Rng& rng, Index vocab, Index avoid) {
  Index obj = static_cast<Index>(rng.uniform_below(static_cast<std::uint64_t>(vocab)));
  while (obj == avoid) {
    obj = static_cast<Index>(rng.uniform_below(static_cast<std::uint64_t>(vocab)));
  }
  return obj;
}

}  // namespace

void validate_preservation_set(const PreservationSet& set) {
  if (!set.covariance) return;
  const Matrix& c0 = *set.covariance;
  if (c0.rows() != set.keys.rows() || c0.cols() != set.keys.rows()) {
    throw DimensionError("cached covariance is not d_k x d_k");
  }
  const Matrix expected = set.keys * set.keys.transpose();
  if (((c0 - expected).array().abs() > 1e-10).any()) {
    throw InputError("cached covariance disagrees with keys * keys^T beyond 1e-10");
  }
  if (((c0 - c0.transpose()).array().abs() > 1e-10).any()) {
    throw InputError("cached covariance is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(c0, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, eig.eigenvalues().maxCoeff())) {
    throw InputError("cached covariance is not positive semi-definite");
  }
}

Vector synthesize_key(const Vector& base_context, long prefix_count,
                      double noise_scale, const FeatureMap& feature_map,
                      std::uint64_t rng_seed) {
  if (prefix_count < 1) throw InputError("prefix_count must be >= 1");
  if (noise_scale < 0.0) throw InputError("noise_scale must be >= 0");
  if (base_context.size() != feature_map.in_dim()) {
    throw DimensionError("base context size " + std::to_string(base_context.size()) +
                         " != feature map input " + std::to_string(feature_map.in_dim()));
  }
  if (noise_scale == 0.0) {
    // All samples coincide; return the exact degenerate mean.
    return feature_map.apply(base_context);
  }
  Rng rng(rng_seed);
  Vector sum = Vector::Zero(feature_map.out_dim());
  for (long i = 0; i < prefix_count; ++i) {
    Vector perturbed = base_context + noise_scale * rng.normal_vector(base_context.size());
    sum += feature_map.apply(perturbed);
  }
  return sum / static_cast<double>(prefix_count);
}

double value_loss(const ToyModel& model, Index layer, const Vector& k_e,
                  Index new_object, double kl_weight, const Vector& v) {
  const ProbeState s = probe_state(model, layer, k_e);
  return value_loss_eval(model, layer, s.v_init, s.probe_v, s.log_q0, new_object,
                         kl_weight, v, false)
      .total;
}

Vector value_loss_gradient(const ToyModel& model, Index layer, const Vector& k_e,
                           Index new_object, double kl_weight, const Vector& v) {
  const ProbeState s = probe_state(model, layer, k_e);
  return value_loss_eval(model, layer, s.v_init, s.probe_v, s.log_q0, new_object,
                         kl_weight, v, true)
      .grad;
}

Vector solve_value(const ToyModel& model, Index layer, const Vector& k_e,
                   Index new_object, double kl_weight, long steps,
                   double step_size) {
  if (steps < 1) throw InputError("solve_value requires steps >= 1");
  if (step_size <= 0.0) throw InputError("solve_value requires step_size > 0");
  if (kl_weight < 0.0) throw InputError("solve_value requires kl_weight >= 0");
  if (new_object < 0 || new_object >= model.vocab()) {
    throw InputError("new_object outside vocabulary");
  }

  const ProbeState s = probe_state(model, layer, k_e);
  Vector v = s.v_init;
  Vector best = v;
  double best_loss = std::numeric_limits<double>::infinity();
  for (long step = 0; step < steps; ++step) {
    ValueLossParts parts = value_loss_eval(model, layer, s.v_init, s.probe_v,
                                           s.log_q0, new_object, kl_weight, v, true);
    if (!std::isfinite(parts.total) || !parts.grad.allFinite()) {
      throw DivergenceError("value solve produced a non-finite loss at step " +
                                std::to_string(step),
                            step);
    }
    if (parts.total < best_loss) {
      best_loss = parts.total;
      best = v;
    }
    v -= step_size * parts.grad;
  }
  // The final iterate counts too.
  const double final_loss = value_loss_eval(model, layer, s.v_init, s.probe_v,
                                            s.log_q0, new_object, kl_weight, v, false)
                                .total;
  if (!std::isfinite(final_loss)) {
    throw DivergenceError("value solve produced a non-finite loss at step " +
                              std::to_string(steps),
                          steps);
  }
  if (final_loss < best_loss) best = v;
  return best;
}

std::vector<FactRecord> generate_fact_set(long count, Index d_ctx, Index d_k,
                                          Index d_v, Index vocab,
                                          std::uint64_t rng_seed,
                                          const FactGenOptions& opts) {
  if (count < 1) throw InputError("fact count must be >= 1");
  if (vocab < 2) throw InputError("vocab must be >= 2 to assign distinct objects");

  const FeatureMap fmap =
      FeatureMap::random(d_k, d_ctx, derive_seed(rng_seed, {kFeatureTag}));

  std::vector<FactRecord> facts;
  facts.reserve(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) {
    const auto fid = static_cast<std::uint64_t>(i);
    FactRecord f;
    f.fact_id = i;
    Rng ctx_rng(derive_seed(rng_seed, {kContextTag, fid}));
    f.base_context = ctx_rng.normal_vector(d_ctx);
    f.edit_key = synthesize_key(f.base_context, opts.prefix_count, opts.noise_scale,
                                fmap, derive_seed(rng_seed, {kKeyNoiseTag, fid}));
    Rng target_rng(derive_seed(rng_seed, {kTargetTag, fid}));
    f.target_value = target_rng.normal_vector(d_v);
    Rng obj_rng(derive_seed(rng_seed, {kObjectTag, fid}));
    f.old_object = static_cast<Index>(obj_rng.uniform_below(static_cast<std::uint64_t>(vocab)));
    f.new_object = draw_distinct_object(obj_rng, vocab, f.old_object);
    for (long p = 0; p < opts.paraphrase_count; ++p) {
      f.paraphrase_keys.push_back(synthesize_key(
          f.base_context, opts.prefix_count, opts.noise_scale, fmap,
          derive_seed(rng_seed, {kParaphraseTag, fid, static_cast<std::uint64_t>(p)})));
    }
    facts.push_back(std::move(f));
  }
  return facts;
}

std::vector<FactRecord> make_model_facts(const ToyModel& model, Index edit_layer,
                                         long count, std::uint64_t seed,
                                         const ModelFactOptions& opts) {
  if (count < 1) throw InputError("fact count must be >= 1");
  std::vector<FactRecord> facts;
  facts.reserve(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) {
    const auto fid = static_cast<std::uint64_t>(i);
    FactRecord f;
    f.fact_id = i;
    Rng ctx_rng(derive_seed(seed, {kContextTag, fid}));
    f.base_context = ctx_rng.normal_vector(model.d_ctx());
    f.edit_key = model.layer_key(edit_layer, f.base_context);

    Vector p = softmax(model.logits(f.base_context));
    p.maxCoeff(&f.old_object);
    Rng obj_rng(derive_seed(seed, {kObjectTag, fid}));
    f.new_object = draw_distinct_object(obj_rng, model.vocab(), f.old_object);

    f.target_value = solve_value(model, edit_layer, f.edit_key, f.new_object,
                                 opts.kl_weight, opts.solve_steps, opts.solve_step_size);

    Rng para_rng(derive_seed(seed, {kParaphraseTag, fid}));
    for (long q = 0; q < opts.paraphrase_count; ++q) {
      Vector ctx = f.base_context +
                   opts.paraphrase_noise * para_rng.normal_vector(model.d_ctx());
      f.paraphrase_keys.push_back(model.layer_key(edit_layer, ctx));
    }
    facts.push_back(std::move(f));
  }
  return facts;
}

Matrix preservation_contexts(Index d_ctx, long count, std::uint64_t seed) {
  if (count < 1) throw InputError("preservation set needs at least one context");
  Rng rng(derive_seed(seed, {fnv1a64("facts.preserve_contexts")}));
  return rng.normal_matrix(d_ctx, count);
}

PreservationSet preservation_from_contexts(const ToyModel& model, Index layer,
                                           const Matrix& contexts,
                                           long neighborhood_count,
                                           std::uint64_t seed) {
  if (contexts.rows() != model.d_ctx()) {
    throw DimensionError("preservation contexts have wrong dimension");
  }
  if (neighborhood_count > contexts.cols()) {
    throw InputError("neighborhood_count exceeds preservation contexts");
  }
  PreservationSet set;
  set.keys.resize(model.d_k(), contexts.cols());
  for (Index j = 0; j < contexts.cols(); ++j) {
    set.keys.col(j) = model.layer_key(layer, contexts.col(j));
  }
  for (long i = 0; i < neighborhood_count; ++i) {
    FactRecord f;
    f.fact_id = i;
    f.base_context = contexts.col(i);
    f.edit_key = set.keys.col(i);
    f.target_value = model.layer_weight(layer) * f.edit_key;
    Vector p = softmax(model.logits(f.base_context));
    p.maxCoeff(&f.old_object);
    Rng obj_rng(derive_seed(seed, {fnv1a64("facts.neighborhood"), static_cast<std::uint64_t>(i)}));
    f.new_object = draw_distinct_object(obj_rng, model.vocab(), f.old_object);
    set.neighborhood_facts.push_back(std::move(f));
  }
  return set;
}

std::string fact_to_json_line(const FactRecord& fact) {
  nlohmann::json j;
  j["fact_id"] = fact.fact_id;
  j["base_context"] = encode_vector(fact.base_context);
  j["edit_key"] = encode_vector(fact.edit_key);
  j["target_value"] = encode_vector(fact.target_value);
  nlohmann::json paras = nlohmann::json::array();
  for (const Vector& p : fact.paraphrase_keys) paras.push_back(encode_vector(p));
  j["paraphrase_keys"] = std::move(paras);
  j["old_object"] = fact.old_object;
  j["new_object"] = fact.new_object;
  return j.dump();
}

FactRecord fact_from_json_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  FactRecord f;
  f.fact_id = j.at("fact_id").get<std::int64_t>();
  f.base_context = decode_vector(j.at("base_context").get<std::string>());
  f.edit_key = decode_vector(j.at("edit_key").get<std::string>());
  f.target_value = decode_vector(j.at("target_value").get<std::string>());
  for (const auto& p : j.at("paraphrase_keys")) {
    f.paraphrase_keys.push_back(decode_vector(p.get<std::string>()));
  }
  f.old_object = j.at("old_object").get<Index>();
  f.new_object = j.at("new_object").get<Index>();
  return f;
}

void write_fact_set_jsonl(const std::filesystem::path& path,
                          const std::vector<FactRecord>& facts) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  for (const FactRecord& f : facts) out << fact_to_json_line(f) << '\n';
  if (!out) throw InputError("write failed for " + path.string());
}

std::vector<FactRecord> read_fact_set_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<FactRecord> facts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    facts.push_back(fact_from_json_line(line));
  }
  return facts;
}

}  // namespace pmedit
