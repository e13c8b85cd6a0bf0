// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/training.hpp"

#include <algorithm>
#include <cmath>

namespace geoweaver {

namespace {

std::mt19937_64 stream_engine(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

constexpr std::uint32_t kInitStream = 3;
constexpr std::uint32_t kBatchStream = 4;

void add_into(Tensor2D& dst, const Tensor2D& src) {
  if (!dst.same_shape(src)) throw DimensionError("gradient accumulation: shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.values()[i] += src.values()[i];
}

}  // namespace

GroundingModel GroundingModel::init(std::size_t num_layers, std::size_t d_geo, std::size_t d_model,
                                    std::size_t num_classes, MergeMode merge, const ModelOptions& options,
                                    std::mt19937_64& rng) {
  GroundingModel model;
  model.bank = BankParams::init(num_layers, d_geo, d_model, merge, rng);
  model.head = GroundingHead::init(num_layers, d_model, options.mode, options.top_k, options.position, rng,
                                   options.router_std);
  const std::size_t probe_in = options.position == GroundingPosition::decoder_fusion ? 2 * d_model : d_model;
  model.probe = ProbeHead::init(probe_in, num_classes, rng);
  return model;
}

GroundingModel GroundingModel::zeros_like() const {
  GroundingModel z;
  z.bank = bank.zeros_like();
  z.head = head.zeros_like();
  z.probe.weight = Tensor2D(probe.weight.rows(), probe.weight.cols());
  z.probe.bias = Tensor2D(probe.bias.rows(), probe.bias.cols());
  return z;
}

const std::vector<std::string>& GroundingModel::parameter_names() {
  static const std::vector<std::string> names = {"bank.gamma", "bank.beta", "phi.w1",        "phi.b1",
                                                 "phi.w2",     "phi.b2",    "router.w",      "router.b",
                                                 "global_logits", "out_proj", "probe.w",     "probe.b"};
  return names;
}

namespace {

// Fixed pairing between parameter names and model tensors.
template <typename Model, typename Fn>
void for_each_tensor(Model& m, Fn&& fn) {
  fn("bank.gamma", m.bank.gamma);
  fn("bank.beta", m.bank.beta);
  fn("phi.w1", m.bank.phi.w1);
  fn("phi.b1", m.bank.phi.b1);
  fn("phi.w2", m.bank.phi.w2);
  fn("phi.b2", m.bank.phi.b2);
  fn("router.w", m.head.router_w);
  fn("router.b", m.head.router_b);
  fn("global_logits", m.head.global_logits);
  fn("out_proj", m.head.out_proj);
  fn("probe.w", m.probe.weight);
  fn("probe.b", m.probe.bias);
}

}  // namespace

ParamStore GroundingModel::to_store() const {
  ParamStore store;
  for_each_tensor(*this, [&](const char* name, const Tensor2D& t) { store.add(name, t); });
  return store;
}

void GroundingModel::load(const ParamStore& store) {
  for_each_tensor(*this, [&](const char* name, Tensor2D& t) {
    const Tensor2D& v = store.value(name);
    if (!v.same_shape(t)) throw DimensionError(std::string("GroundingModel::load: shape mismatch for ") + name);
    t = v;
  });
}

void GroundingModel::write_grads(const GroundingModel& grads, ParamStore& store) {
  for_each_tensor(grads, [&](const char* name, const Tensor2D& g) {
    Tensor2D& slot = store.grad(name);
    if (!slot.same_shape(g)) throw DimensionError(std::string("write_grads: shape mismatch for ") + name);
    slot = g;
  });
}

BatchPass batch_forward(const GroundingModel& model, std::span<const ProxySample* const> batch,
                        GroundingModel* grads) {
  if (batch.empty()) throw DimensionError("batch_forward: empty batch");
  const RawLayerStack& first = batch.front()->raw;
  const std::size_t per_sample = first.merged_token_count();
  const std::size_t d = model.head.d_model();
  const std::size_t layers = model.bank.num_layers();
  const std::size_t n = per_sample * batch.size();

  VisualTokens tokens;
  tokens.num_frames = first.num_frames * batch.size();
  tokens.tokens_per_frame = first.merged_tokens_per_frame();
  tokens.matrix = Tensor2D(n, d);
  BatchPass pass;
  pass.labels.reserve(n);
  pass.roles.reserve(n);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const ProxySample& sample = *batch[s];
    if (sample.raw.merged_token_count() != per_sample || sample.visual.token_count() != per_sample ||
        sample.visual.d_model() != d || sample.raw.num_layers() != layers) {
      throw DimensionError("batch_forward: sample " + std::to_string(s) + " does not match the batch shape");
    }
    std::copy(sample.visual.matrix.values().begin(), sample.visual.matrix.values().end(),
              tokens.matrix.values().begin() + static_cast<std::ptrdiff_t>(s * per_sample * d));
    pass.labels.insert(pass.labels.end(), sample.labels.begin(), sample.labels.end());
    pass.roles.insert(pass.roles.end(), sample.roles.begin(), sample.roles.end());
  }

  // Selection first, so the bank is only evaluated where it is read.
  const RoutingWeights routing = allocate(tokens, model.head);
  std::vector<BankQuery> queries;
  queries.reserve(n * std::min(model.head.top_k, layers));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l : routing.selected[i]) queries.push_back({&batch[i / per_sample]->raw, i % per_sample, l});
  }
  SparseBankProjection projection;
  const Tensor2D& rows = projection.forward(queries, model.bank);

  GeometryBank bank;
  bank.layer_indices = first.layer_indices;
  bank.num_frames = tokens.num_frames;
  bank.tokens_per_frame = tokens.tokens_per_frame;
  bank.d_model = d;
  bank.layers.assign(layers, Tensor2D(n, d));
  for (std::size_t q = 0, i = 0; i < n; ++i) {
    for (std::size_t l : routing.selected[i]) {
      const auto src = rows.row(q++);
      std::copy(src.begin(), src.end(), bank.layers[l].row(i).begin());
    }
  }

  const GroundingResult result = ground_tokens(tokens, bank, model.head);
  ProbeOutput out = probe_loss(result.grounded, model.probe, pass.labels);
  pass.loss = out.loss;
  pass.precise_loss = out.precise_loss;

  if (grads != nullptr) {
    const ProbeGradients pg = probe_loss_backward(result.grounded, model.probe, pass.labels, out);
    add_into(grads->probe.weight, pg.probe.weight);
    add_into(grads->probe.bias, pg.probe.bias);
    const GroundingGradients gg = ground_tokens_backward(tokens, bank, model.head, result, pg.grounded, pg.late);
    add_into(grads->head.router_w, gg.head.router_w);
    add_into(grads->head.router_b, gg.head.router_b);
    add_into(grads->head.out_proj, gg.head.out_proj);
    add_into(grads->head.global_logits, gg.head.global_logits);
    Tensor2D grad_rows(queries.size(), d);
    for (std::size_t q = 0, i = 0; i < n; ++i) {
      for (std::size_t l : routing.selected[i]) {
        const auto src = gg.bank[l].row(i);
        std::copy(src.begin(), src.end(), grad_rows.row(q++).begin());
      }
    }
    projection.backward(grad_rows, model.bank, grads->bank);
  }

  pass.logits = std::move(out.logits);
  pass.routing = result.routing;
  return pass;
}

EvalMetrics evaluate(const GroundingModel& model, std::span<const ProxySample> samples,
                     std::span<const int> signal_positions, std::size_t chunk) {
  if (chunk == 0) throw ConfigError("evaluate: chunk must be >= 1");
  const std::size_t layers = model.bank.num_layers();
  EvalMetrics m;
  m.selection_counts.assign(layers, 0);
  std::vector<std::size_t> role_tokens(signal_positions.size(), 0);
  std::vector<std::size_t> role_hits(signal_positions.size(), 0);
  std::size_t correct = 0;
  std::size_t hits = 0;
  std::size_t ties = 0;
  double loss_sum = 0.0;

  std::vector<const ProxySample*> batch;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    batch.clear();
    for (std::size_t s = start; s < std::min(samples.size(), start + chunk); ++s) batch.push_back(&samples[s]);
    const BatchPass pass = batch_forward(model, batch);
    const std::size_t n = pass.labels.size();
    loss_sum += pass.loss * static_cast<double>(n);
    m.tokens += n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto z = pass.logits.row(i);
      const auto pred = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
      if (pred == pass.labels[i]) ++correct;

      const auto& selected = pass.routing.selected[i];
      for (std::size_t l : selected) ++m.selection_counts[l];
      const auto role = static_cast<std::size_t>(pass.roles[i]);
      if (role < signal_positions.size()) {
        ++role_tokens[role];
        if (signal_positions[role] >= 0 && selected.front() == static_cast<std::size_t>(signal_positions[role])) {
          ++role_hits[role];
          ++hits;
        }
      }
      if (layers > 1) {
        const auto r = pass.routing.logits.row(i);
        std::vector<double> sorted(r.begin(), r.end());
        std::partial_sort(sorted.begin(), sorted.begin() + 2, sorted.end(), std::greater<>());
        if (sorted[0] == sorted[1]) ++ties;
      }
    }
  }
  if (m.tokens == 0) return m;
  const auto total = static_cast<double>(m.tokens);
  m.accuracy = static_cast<double>(correct) / total;
  m.loss = loss_sum / total;
  m.agreement = static_cast<double>(hits) / total;
  m.tie_fraction = static_cast<double>(ties) / total;
  m.selection_frequency.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) m.selection_frequency[l] = static_cast<double>(m.selection_counts[l]) / total;
  m.agreement_per_role.resize(role_tokens.size());
  for (std::size_t r = 0; r < role_tokens.size(); ++r) {
    m.agreement_per_role[r] =
        role_tokens[r] == 0 ? 0.0 : static_cast<double>(role_hits[r]) / static_cast<double>(role_tokens[r]);
  }
  return m;
}

TrainResult train(const ProxyConfig& config, const ProxyDataset& data, const ModelOptions& options,
                  std::uint64_t seed) {
  config.validate();
  if (options.top_k < 1) throw ConfigError("top_k: must be >= 1");
  if (data.train.empty() || data.test.empty()) throw DataError("train: empty dataset");

  TrainResult result;
  result.bank_layers = data.train.front().raw.layer_indices;
  result.signal_positions = signal_positions(config, result.bank_layers);

  std::mt19937_64 init_rng = stream_engine(seed, kInitStream);
  result.model = GroundingModel::init(result.bank_layers.size(), config.d_geo, config.d_model, config.num_classes,
                                      config.merge, options, init_rng);
  GroundingModel& model = result.model;
  result.initial_test = evaluate(model, data.test, result.signal_positions);

  ParamStore store = model.to_store();
  const AdamOptions adam{config.lr, 0.9, 0.999, 1e-8};
  std::mt19937_64 batch_rng = stream_engine(seed, kBatchStream);
  std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
  std::vector<const ProxySample*> batch(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& p : batch) p = &data.train[pick(batch_rng)];
    GroundingModel grads = model.zeros_like();
    const BatchPass pass = batch_forward(model, batch, &grads);
    if (!std::isfinite(pass.loss)) throw TrainingError(step, "non-finite loss");
    GroundingModel::write_grads(grads, store);
    adam_update(store, adam);
    model.load(store);
    if (config.trace_every > 0 && ((step + 1) % config.trace_every == 0 || step + 1 == config.steps)) {
      result.trace.push_back({step + 1, pass.loss});
    }
  }
  for (const Param& p : store.params()) {
    if (!p.value.all_finite()) throw TrainingError(config.steps, "non-finite parameter " + p.name);
  }

  result.train = evaluate(model, data.train, result.signal_positions);
  result.test = evaluate(model, data.test, result.signal_positions);
  return result;
}

}  // namespace geoweaver
