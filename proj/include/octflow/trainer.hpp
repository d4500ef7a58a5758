#pragma once
// Stage-wise training (coarse to fine, earlier stages frozen) and dataset
// evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "octflow/autodiff/checkpoint.hpp"
#include "octflow/autodiff/optim.hpp"
#include "octflow/dataset.hpp"
#include "octflow/estimator.hpp"
#include "octflow/loss.hpp"

namespace octflow {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double lr = 1e-4;
  int patience = 20;
  LossWeights weights;
  std::uint64_t seed = 0;
  int max_steps = 0;  // optimizer steps per stage; 0 = no cap

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
    if (patience < 1) throw ConfigError("patience must be >= 1, got " + std::to_string(patience));
    if (batch_size < 1) throw ConfigError("batch size must be >= 1, got " + std::to_string(batch_size));
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    weights.validate();
  }
};

// Tracks the minimum validation loss. Ties keep the earlier epoch.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }

  // Returns true when this epoch is the new best.
  bool observe(double val_loss) {
    ++epoch_;
    if (epoch_ == 1 || val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      return true;
    }
    return false;
  }
  bool should_stop() const { return epoch_ - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_ = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_epe = 0.0;  // stage endpoint error at the stage's scale
  double val_epe = 0.0;
  long steps = 0;  // cumulative

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  long steps = 0;
  double initial_train_loss = 0.0;  // before the first update, evaluation mode
};

inline std::string history_csv(const std::vector<EpochStats>& h) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_loss,val_loss,train_epe,val_epe,steps\n";
  for (const auto& e : h)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.train_epe << ',' << e.val_epe << ','
       << e.steps << '\n';
  return os.str();
}

struct TrainingData {
  std::vector<PairSample> train;
  std::vector<PairSample> val;
};

inline std::vector<PairSample> load_split(const std::filesystem::path& dir, const DatasetManifest& m, Split s) {
  std::vector<PairSample> out;
  for (const PairRecord* r : m.select(s)) out.push_back(load_pair(dir, *r));
  return out;
}

enum class Net { lateral, depth };

namespace detail {

// One pair's constant tensors for a single stage, each (C, H, W).
struct StageItem {
  std::vector<float> input, source, source_valid, target, target_valid, prior, gt, gt_valid;
  ScalarGrid reference;  // target depth, for the edge weights
};

inline std::vector<float> mask_floats(const Mask& m) {
  std::vector<float> v(m.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] ? 1.0F : 0.0F;
  return v;
}

inline FlowField gt_at_level(const FlowField& gt, int levels_below) {
  FlowField g = gt;
  for (int i = 0; i < levels_below; ++i) g = downsample_flow2x(g);
  return g;
}

inline StageItem lateral_item(PipelineModel& m, int s, const PairSample& p) {
  const int S = m.stages;
  const ScalePyramid ps = build_pyramid(drop_offset(p.source), S), pt = build_pyramid(drop_offset(p.target), S);
  const FlowField prior = s == 0 ? zero_prior(ps[0]) : upsample_flow2x(run_lateral(m.f, p.source, p.target, nullptr, s));
  const LateralLevel lv = make_lateral_level(ps[s], pt[s], prior);
  const int w = pt[s].width(), h = pt[s].height();
  const std::size_t n = static_cast<std::size_t>(w) * h;
  StageItem it;
  ad::Tensor<float> in({1, kLateralInputChannels, h, w});
  pack_lateral_input(lv.warped_census, lv.target_census, prior, in, 0);
  it.input = std::move(in.data);
  it.source = lv.warped_census.planes;
  it.source_valid = mask_floats(lv.warped_census.valid);
  it.target = lv.target_census.planes;
  it.target_valid = mask_floats(lv.target_census.valid);
  it.prior.assign(prior.data().begin(), prior.data().end());
  const FlowField g = gt_at_level(p.gt, S - 1 - s);
  it.gt.assign(g.data().begin(), g.data().begin() + 2 * n);
  it.gt_valid = mask_floats(pt[s].valid);
  it.reference = pt[s].values;
  return it;
}

inline StageItem depth_item(PipelineModel& m, int s, const PairSample& p) {
  const int S = m.stages;
  const FlowField lateral = run_lateral(m.f, p.source, p.target);
  const DepthMap warped = backward_warp(p.source, lateral).warped;
  const ScalePyramid pw = build_pyramid(warped, S), pt = build_pyramid(p.target, S);
  const int w = pt[s].width(), h = pt[s].height();
  const ScalarGrid prior = s == 0 ? ScalarGrid(w, h) : upsample2x(run_depth(m.d, warped, p.target, s));
  const DepthMap lifted = apply_depth_flow(pw[s], prior);
  StageItem it;
  ad::Tensor<float> in({1, kDepthInputChannels, h, w});
  pack_depth_input(lifted, pt[s], prior, in, 0);
  it.input = std::move(in.data);
  it.source.resize(lifted.values.size());
  for (std::size_t i = 0; i < it.source.size(); ++i) it.source[i] = lifted.valid[i] ? lifted.values[i] : 0.0F;
  it.source_valid = mask_floats(lifted.valid);
  it.target.resize(pt[s].values.size());
  for (std::size_t i = 0; i < it.target.size(); ++i) it.target[i] = pt[s].valid[i] ? pt[s].values[i] : 0.0F;
  it.target_valid = mask_floats(pt[s].valid);
  it.prior.assign(prior.data().begin(), prior.data().end());
  const FlowField g = gt_at_level(p.gt, S - 1 - s);
  const auto dz = g.channel(2);
  it.gt.assign(dz.begin(), dz.end());
  it.gt_valid = it.target_valid;
  it.reference = pt[s].values;
  return it;
}

// The loss graph for one batch size. Inputs are rebound per batch.
class StageGraph {
 public:
  StageGraph(StageNetwork& net, Net kind, int s, const LossWeights& w, int n, int h, int width, std::uint64_t seed)
      : g_(seed), kind_(kind), n_(n), h_(h), w_(width) {
    using lossgraph::census_reconstruction;
    const int fc = kind == Net::lateral ? 2 : 1;
    x_ = g_.input("input");
    src_ = g_.input("source");
    srcv_ = g_.input("source_valid");
    tgt_ = g_.input("target");
    tgtv_ = g_.input("target_valid");
    prior_ = g_.input("prior");
    gt_ = g_.input("gt");
    gtv_ = g_.input("gt_valid");
    wx_ = g_.input("wx");
    wy_ = g_.input("wy");
    mx_ = g_.input("mx");
    my_ = g_.input("my");
    const ad::Var residual = net.build(g_, x_);
    const ad::Var total = g_.add(prior_, residual);
    epe_ = lossgraph::epe(g_, total, gt_, gtv_);
    const ad::Var rec =
        kind == Net::lateral
            ? census_reconstruction(g_, src_, srcv_, residual, tgt_, tgtv_)
            : lossgraph::depth_reconstruction(g_, src_, residual, tgt_, g_.mul(srcv_, tgtv_));
    const ad::Var smooth = lossgraph::smoothness(g_, total, wx_, wy_, mx_, my_, fc);
    loss_ = lossgraph::stage(g_, s, w, epe_, rec, smooth);
  }

  int batch() const { return n_; }

  void bind(const std::vector<const StageItem*>& items) {
    const int fc = kind_ == Net::lateral ? 2 : 1, sc = kind_ == Net::lateral ? kCensusBits : 1;
    const int ic = kind_ == Net::lateral ? kLateralInputChannels : kDepthInputChannels;
    auto stack = [&](ad::Var v, int c, auto member) {
      ad::Tensor<float> t({n_, c, h_, w_});
      for (int b = 0; b < n_; ++b) std::copy((items[b]->*member).begin(), (items[b]->*member).end(), t.sample(b));
      g_.set_input(v, std::move(t));
    };
    stack(x_, ic, &StageItem::input);
    stack(src_, sc, &StageItem::source);
    stack(srcv_, 1, &StageItem::source_valid);
    stack(tgt_, sc, &StageItem::target);
    stack(tgtv_, 1, &StageItem::target_valid);
    stack(prior_, fc, &StageItem::prior);
    stack(gt_, fc, &StageItem::gt);
    stack(gtv_, 1, &StageItem::gt_valid);
    std::vector<const ScalarGrid*> refs;
    for (const auto* it : items) refs.push_back(&it->reference);
    auto sm = lossgraph::smoothness_inputs<float>(refs, fc);
    g_.set_input(wx_, std::move(sm.wx));
    g_.set_input(wy_, std::move(sm.wy));
    g_.set_input(mx_, std::move(sm.mx));
    g_.set_input(my_, std::move(sm.my));
  }

  ad::Graph<float>& graph() { return g_; }
  double loss() const { return g_.value(loss_).data[0]; }
  double epe() const { return g_.value(epe_).data[0]; }
  ad::Var loss_var() const { return loss_; }

 private:
  ad::Graph<float> g_;
  Net kind_;
  int n_, h_, w_;
  ad::Var x_, src_, srcv_, tgt_, tgtv_, prior_, gt_, gtv_, wx_, wy_, mx_, my_, epe_, loss_;
};

inline std::uint64_t stage_seed(std::uint64_t seed, Net net, int s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(net), static_cast<std::uint32_t>(s), 0x7a11u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

struct StageScore {
  double loss = 0.0;
  double epe = 0.0;
};

// Evaluation-mode loss and EPE, batch-weighted over pairs.
template <typename GraphFor>
StageScore score(const std::vector<StageItem>& items, GraphFor&& graph_for, int batch_size) {
  StageScore sc;
  for (std::size_t b = 0; b < items.size(); b += batch_size) {
    const int n = static_cast<int>(std::min<std::size_t>(batch_size, items.size() - b));
    std::vector<const StageItem*> batch;
    for (int i = 0; i < n; ++i) batch.push_back(&items[b + i]);
    auto& sg = graph_for(n);
    sg.graph().set_training(false);
    sg.bind(batch);
    sg.graph().forward();
    sc.loss += sg.loss() * n;
    sc.epe += sg.epe() * n;
  }
  sc.loss /= items.size();
  sc.epe /= items.size();
  return sc;
}

inline std::vector<StageItem> stage_items(PipelineModel& m, Net net, int s, const std::vector<PairSample>& ps) {
  std::vector<StageItem> items;
  items.reserve(ps.size());
  for (const auto& p : ps) {
    if (p.source.width() != ps[0].source.width() || p.source.height() != ps[0].source.height())
      throw DomainError("training pairs must share one size");
    items.push_back(net == Net::lateral ? lateral_item(m, s, p) : depth_item(m, s, p));
  }
  return items;
}

inline StageNetwork& stage_network(PipelineModel& m, Net net, int s) {
  if (s < 0 || s >= m.stages) throw DomainError("stage index " + std::to_string(s) + " out of range");
  return net == Net::lateral ? m.f[s].network() : m.d[s].network();
}

inline std::string stage_name(Net net, int s) { return std::string(net == Net::lateral ? "f" : "d") + std::to_string(s); }

}  // namespace detail

// Optimizes stage `s` of the lateral (F) or depth (D) network against the
// stage loss at scale s. Stages < s (and, for D, every F stage) are used
// frozen to build priors. On return the stage holds the parameters with the
// lowest validation loss.
inline TrainResult train_stage(PipelineModel& model, Net net, int s, const TrainingData& data, const TrainConfig& cfg) {
  cfg.validate();
  StageNetwork& nw = detail::stage_network(model, net, s);
  if (data.train.empty()) throw ConfigError("training set is empty");
  if (data.val.empty()) throw ConfigError("validation set is empty");
  const std::string who = "stage " + detail::stage_name(net, s);
  model.check_extent(data.train[0].source.width(), data.train[0].source.height());

  const std::vector<detail::StageItem> train = detail::stage_items(model, net, s, data.train),
                                        val = detail::stage_items(model, net, s, data.val);
  const int h = train[0].reference.height(), w = train[0].reference.width();

  const std::uint64_t seed = detail::stage_seed(cfg.seed, net, s);
  std::map<int, std::unique_ptr<detail::StageGraph>> graphs;
  auto graph_for = [&](int n) -> detail::StageGraph& {
    auto& g = graphs[n];
    if (!g) g = std::make_unique<detail::StageGraph>(nw, net, s, cfg.weights, n, h, w, seed + static_cast<std::uint64_t>(n));
    return *g;
  };

  auto evaluate = [&](const std::vector<detail::StageItem>& items) {
    return detail::score(items, graph_for, cfg.batch_size);
  };

  TrainResult res;
  // Graph failures (e.g. a NaN flow leaving no in-bounds pixel) are
  // reported with the training position.
  auto at = [&](int epoch, long step) {
    return who + ", epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": ";
  };
  try {
    res.initial_train_loss = evaluate(train).loss;
  } catch (const Error& e) {
    throw TrainingError(at(0, 0) + e.what());
  }
  ad::AdamState<float> adam;
  const ad::AdamConfig acfg{cfg.lr};
  EarlyStopping stopper(cfg.patience);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(train.size());
  Bytes best = ad::encode_checkpoint(nw.parameters());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double run_loss = 0.0, run_epe = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      if (cfg.max_steps && res.steps >= cfg.max_steps) break;
      const int n = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - b));
      std::vector<const detail::StageItem*> batch;
      for (int i = 0; i < n; ++i) batch.push_back(&train[order[b + i]]);
      auto& sg = graph_for(n);
      sg.graph().set_training(true);
      sg.bind(batch);
      double loss = 0.0;
      try {
        sg.graph().forward();
        loss = sg.loss();
        if (!std::isfinite(loss)) throw TrainingError("non-finite loss");
        nw.parameters().zero_grad();
        sg.graph().backward(sg.loss_var());
        ad::adam_step(nw.parameters(), adam, acfg);
      } catch (const Error& e) {
        throw TrainingError(at(epoch, res.steps + 1) + e.what());
      }
      ++res.steps;
      run_loss += loss * n;
      run_epe += sg.epe() * n;
      seen += n;
    }
    if (seen == 0) break;  // step cap reached
    detail::StageScore v;
    try {
      v = evaluate(val);
    } catch (const Error& e) {
      throw TrainingError(at(epoch, res.steps) + "validation: " + e.what());
    }
    const auto [vl, ve] = v;
    if (!std::isfinite(vl)) throw TrainingError(at(epoch, res.steps) + "non-finite validation loss");
    res.history.push_back({epoch, run_loss / seen, vl, run_epe / seen, ve, res.steps});
    if (stopper.observe(vl)) best = ad::encode_checkpoint(nw.parameters());
    if (stopper.should_stop()) {
      res.stopped_early = true;
      break;
    }
  }
  ad::decode_checkpoint_into(best, nw.parameters());
  res.best_epoch = stopper.best_epoch();
  res.best_val_loss = stopper.best_loss();
  return res;
}

// Evaluation-mode stage loss and EPE of the current parameters at scale s,
// batched as in training.
inline detail::StageScore evaluate_stage(PipelineModel& model, Net net, int s, const std::vector<PairSample>& pairs,
                                         const TrainConfig& cfg) {
  cfg.validate();
  StageNetwork& nw = detail::stage_network(model, net, s);
  if (pairs.empty()) throw ConfigError("no pairs to evaluate");
  const auto items = detail::stage_items(model, net, s, pairs);
  std::map<int, std::unique_ptr<detail::StageGraph>> graphs;
  auto graph_for = [&](int n) -> detail::StageGraph& {
    auto& g = graphs[n];
    if (!g)
      g = std::make_unique<detail::StageGraph>(nw, net, s, cfg.weights, n, items[0].reference.height(),
                                               items[0].reference.width(), 0);
    return *g;
  };
  return detail::score(items, graph_for, cfg.batch_size);
}

struct PipelineTraining {
  std::vector<std::pair<std::string, TrainResult>> stages;  // trained in order
};

inline constexpr const char* kTrainedF = "trained.f_stages";
inline constexpr const char* kTrainedD = "trained.d_stages";

inline int trained_count(const PipelineModel& m, const char* key) {
  return m.notes.has(key) ? parse_value<int>(key, m.notes.at(key)) : 0;
}

// F stages coarse to fine, then D stages with the lateral flow frozen.
// Progress is recorded in the model notes; stages already marked trained are
// skipped, so a model saved after any stage resumes where it stopped. When
// `out` is given the model and per-stage histories are written after every
// stage. A non-negative `max_stages` ends the call after that many stages.
inline PipelineTraining train_pipeline(PipelineModel& model, const TrainingData& data, const TrainConfig& cfg,
                                       const std::filesystem::path* out = nullptr, int max_stages = -1) {
  cfg.validate();
  if (out && !std::filesystem::is_directory(*out)) throw IoError("output directory does not exist: " + out->string());
  if (trained_count(model, kTrainedF) + trained_count(model, kTrainedD) > 0) {
    const LossWeights& a = model.weights;
    const LossWeights& b = cfg.weights;
    if (a.alpha != b.alpha || a.beta != b.beta || a.gamma != b.gamma)
      throw ConfigError("cannot resume: the model was trained with different loss weights");
  }
  model.weights = cfg.weights;
  PipelineTraining log;
  auto run = [&](Net net, const char* key, auto& stages) {
    for (int s = trained_count(model, key); s < model.stages && max_stages != 0; ++s, --max_stages) {
      if (stages[s].kind() == StageKind::convolutional) {
        TrainResult r = train_stage(model, net, s, data, cfg);
        const std::string name = detail::stage_name(net, s);
        if (out) {
          const std::string csv = history_csv(r.history);
          write_file(*out / ("history_" + name + ".csv"),
                     std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
        }
        model.notes.set("train." + name + ".best_epoch", std::to_string(r.best_epoch));
        model.notes.set("train." + name + ".best_val_loss", format_double(r.best_val_loss));
        log.stages.emplace_back(name, std::move(r));
      }
      model.notes.set(key, std::to_string(s + 1));
      if (out) save_model(*out, model);
    }
  };
  run(Net::lateral, kTrainedF, model.f);
  run(Net::depth, kTrainedD, model.d);
  return log;
}

// ---- evaluation --------------------------------------------------------------

struct EvalReport {
  std::string split;
  std::size_t pairs = 0;
  double mean_epe = 0.0, std_epe = 0.0, median_epe = 0.0;
  double mean_epe_um = 0.0;
  double ms_per_pair = 0.0;
  double depth_mae = 0.0;  // mean over pairs of |dz - gt dz|
  std::vector<double> per_pair;
};

// Mean, population standard deviation and median across pairs.
inline EvalReport summarize_epe(std::string split, std::vector<double> epes, double ms_per_pair,
                                double pitch_um = 6.0) {
  if (epes.empty()) throw EvaluationError("split '" + split + "' has no pairs");
  EvalReport r;
  r.split = std::move(split);
  r.pairs = epes.size();
  const double n = static_cast<double>(epes.size());
  r.mean_epe = std::accumulate(epes.begin(), epes.end(), 0.0) / n;
  double ss = 0.0;
  for (double e : epes) ss += (e - r.mean_epe) * (e - r.mean_epe);
  r.std_epe = std::sqrt(ss / n);
  std::vector<double> sorted = epes;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size() / 2;
  r.median_epe = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  r.mean_epe_um = r.mean_epe * pitch_um;
  r.ms_per_pair = ms_per_pair;
  r.per_pair = std::move(epes);
  return r;
}

struct EvalOptions {
  int margin = 0;  // pixels ignored along each border
  double pitch_um = 6.0;
};

struct PairError {
  double epe = 0.0;
  double depth_mae = 0.0;
};

// Errors of one prediction on pixels where both it and the ground truth are
// valid, away from the border.
inline PairError pair_error(const PipelineResult& r, const PairSample& p, int margin) {
  const int w = p.target.width(), h = p.target.height();
  double epe = 0.0, dz = 0.0;
  std::size_t n = 0;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      if (!r.valid(x, y) || !p.target.valid(x, y)) continue;
      const double ex = r.flow.at(0, x, y) - p.gt.at(0, x, y), ey = r.flow.at(1, x, y) - p.gt.at(1, x, y),
                   ez = r.flow.at(2, x, y) - p.gt.at(2, x, y);
      epe += std::sqrt(ex * ex + ey * ey + ez * ez);
      dz += std::abs(ez);
      ++n;
    }
  if (n == 0) throw EvaluationError("no valid pixels to evaluate");
  return {epe / n, dz / n};
}

namespace detail {

template <typename Load>
EvalReport evaluate_each(PipelineModel& model, std::size_t count, Load&& load, const std::string& split,
                         const EvalOptions& opt) {
  if (count == 0) throw EvaluationError("split '" + split + "' has no pairs");
  std::vector<double> epes;
  double dz = 0.0, ms = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const PairSample p = load(i);
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult r = run_pipeline(model, p.source, p.target);
    ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const PairError e = pair_error(r, p, opt.margin);
    epes.push_back(e.epe);
    dz += e.depth_mae;
  }
  EvalReport rep = summarize_epe(split, std::move(epes), ms / count, opt.pitch_um);
  rep.depth_mae = dz / count;
  return rep;
}

}  // namespace detail

inline EvalReport evaluate_pairs(PipelineModel& model, const std::vector<PairSample>& pairs, const std::string& split,
                                 const EvalOptions& opt = {}) {
  return detail::evaluate_each(model, pairs.size(), [&](std::size_t i) { return pairs[i]; }, split, opt);
}

// Pairs are read one at a time; a missing file raises IoError naming the pair.
inline EvalReport evaluate_dataset(PipelineModel& model, const std::filesystem::path& dir, const DatasetManifest& m,
                                   Split split, const EvalOptions& opt = {}) {
  const auto recs = m.select(split);
  return detail::evaluate_each(model, recs.size(), [&](std::size_t i) { return load_pair(dir, *recs[i]); },
                               to_string(split), opt);
}

inline constexpr const char* kEvalCsvHeader = "split,mean_epe_vox,std_epe_vox,median_epe_vox,mean_epe_um,ms_per_pair";

inline std::string eval_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os.precision(9);
  os << kEvalCsvHeader << '\n';
  for (const auto& r : reports)
    os << r.split << ',' << r.mean_epe << ',' << r.std_epe << ',' << r.median_epe << ',' << r.mean_epe_um << ','
       << r.ms_per_pair << '\n';
  return os.str();
}

inline std::string eval_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %6s %28s %12s %10s\n", "split", "pairs", "EPE vox mean +- std (med)", "EPE um",
                "ms/pair");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-6s %6zu %9.3f +- %6.3f (%6.3f) %12.2f %10.2f\n", r.split.c_str(), r.pairs,
                  r.mean_epe, r.std_epe, r.median_epe, r.mean_epe_um, r.ms_per_pair);
    os << line;
  }
  return os.str();
}

}  // namespace octflow
