#pragma once

#include <cblas.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geomamba/checkpoint.hpp"
#include "geomamba/config.hpp"
#include "geomamba/eval.hpp"
#include "geomamba/imgproc.hpp"
#include "geomamba/losses.hpp"
#include "geomamba/model.hpp"
#include "geomamba/png_io.hpp"
#include "geomamba/svg.hpp"
#include "geomamba/synthdata.hpp"

namespace geomamba {

/// Non-finite loss or gradient; the CLI maps it to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geomamba

namespace geomamba::train {

using imgproc::BinaryMask;
using imgproc::GrayImage;
using imgproc::RgbImage;
using model::Modality;

// ---------------------------------------------------------------------------
// Data

struct Sample {
  synth::ManifestRecord record;
  Modality modality = Modality::kOptical;
  RgbImage optical;      // network input (preprocessed) for optical records
  GrayImage sar;         // network input (preprocessed) for SAR records
  RgbImage optical_raw;  // kept only when pseudo-labels come from raw pixels
  GrayImage sar_raw;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;
  std::size_t image_size = 0;

  std::vector<std::size_t> split_indices(synth::Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].record.split == s) out.push_back(i);
    return out;
  }
};

inline Dataset load_dataset(const std::string& root, const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const auto records = synth::read_manifest((fs::path(root) / "manifest.jsonl").string());
  if (records.empty()) throw IoError("manifest under '" + root + "' is empty");
  imgproc::PreprocessParams pp;
  Dataset ds;
  ds.image_size = cfg.image_size;
  int max_label = -1;
  for (const auto& r : records) {
    if (r.width != cfg.image_size || r.height != cfg.image_size)
      throw IoError("sample '" + r.id + "' is " + std::to_string(r.width) + "x" + std::to_string(r.height) +
                    ", run expects " + std::to_string(cfg.image_size));
    if (r.label < 0) throw IoError("sample '" + r.id + "' has a negative label");
    Sample s;
    s.record = r;
    const std::string file = (fs::path(root) / r.path).string();
    if (r.modality == "optical") {
      s.modality = Modality::kOptical;
      RgbImage raw = imgproc::read_rgb_png(file);
      s.optical = imgproc::preprocess_optical(raw, pp);
      if (!cfg.pseudo_from_preprocessed) s.optical_raw = std::move(raw);
    } else {
      s.modality = Modality::kSar;
      GrayImage raw = imgproc::read_gray_png(file);
      s.sar = imgproc::preprocess_sar(raw, pp);
      if (!cfg.pseudo_from_preprocessed) s.sar_raw = std::move(raw);
    }
    if (r.split == synth::Split::kTrain) max_label = std::max(max_label, r.label);
    ds.samples.push_back(std::move(s));
  }
  for (const auto& s : ds.samples)
    if (s.record.label > max_label)
      throw IoError("sample '" + s.record.id + "' has a label absent from the training split");
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

inline double normalize_pixel(double v) { return (v / 255.0 - 0.5) / 0.5; }

/// Images to an [N,3,H,W] tensor; SAR intensity is replicated over the three channels.
inline Tensor images_to_tensor(const std::vector<const RgbImage*>& opt, const std::vector<const GrayImage*>& sar) {
  const bool is_opt = !opt.empty();
  const std::size_t n = is_opt ? opt.size() : sar.size();
  const std::size_t h = is_opt ? opt[0]->height : sar[0]->height, w = is_opt ? opt[0]->width : sar[0]->width;
  std::vector<double> v(n * 3 * h * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < h * w; ++p)
        v[((i * 3 + c) * h * w) + p] = normalize_pixel(is_opt ? opt[i]->pixels[p * 3 + c] : sar[i]->pixels[p]);
  return Tensor::from({n, 3, h, w}, std::move(v));
}

/// [N,2,H,W]: normalized SAR intensity and its Harris mask.
inline Tensor prior_tensor(const std::vector<const GrayImage*>& sar, const std::vector<BinaryMask>& harris) {
  const std::size_t n = sar.size(), h = sar[0]->height, w = sar[0]->width;
  std::vector<double> v(n * 2 * h * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < h * w; ++p) {
      v[(i * 2) * h * w + p] = normalize_pixel(sar[i]->pixels[p]);
      v[(i * 2 + 1) * h * w + p] = harris[i].bits[p] ? 1.0 : 0.0;
    }
  return Tensor::from({n, 2, h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// Sampling

/// Training sample indices grouped by label and modality.
struct LabelIndex {
  std::map<int, std::array<std::vector<std::size_t>, 2>> by_label;

  explicit LabelIndex(const Dataset& ds) {
    for (auto i : ds.split_indices(synth::Split::kTrain))
      by_label[ds.samples[i].record.label][static_cast<std::size_t>(ds.samples[i].modality)].push_back(i);
  }
};

struct PkBatch {
  std::vector<std::size_t> optical;  // P*K sample indices, label-major
  std::vector<std::size_t> sar;      // aligned with `optical` by label
  std::vector<int> labels;           // label of row i in either stream
  bool with_replacement = false;     // some label had fewer than K instances in a modality
};

/// P distinct labels, then K instances per modality for each. Only labels with
/// samples in both modalities are eligible.
inline PkBatch pk_sample(const LabelIndex& index, std::size_t p, std::size_t k, Rng& rng) {
  std::vector<int> eligible;
  for (const auto& [label, mods] : index.by_label)
    if (!mods[0].empty() && !mods[1].empty()) eligible.push_back(label);
  if (eligible.size() < p)
    throw std::invalid_argument("pk_sample: " + std::to_string(p) + " labels requested, " +
                                std::to_string(eligible.size()) + " have both modalities");
  // partial Fisher-Yates for the label draw
  for (std::size_t i = 0; i < p; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  PkBatch b;
  for (std::size_t i = 0; i < p; ++i) {
    const int label = eligible[i];
    const auto& mods = index.by_label.at(label);
    for (std::size_t m = 0; m < 2; ++m) {
      std::vector<std::size_t> pool = mods[m];
      auto& dst = m == 0 ? b.optical : b.sar;
      if (pool.size() >= k) {
        for (std::size_t j = 0; j < k; ++j) {
          std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
          std::swap(pool[j], pool[pick(rng)]);
          dst.push_back(pool[j]);
        }
      } else {
        b.with_replacement = true;
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t j = 0; j < k; ++j) dst.push_back(pool[pick(rng)]);
      }
    }
    for (std::size_t j = 0; j < k; ++j) b.labels.push_back(label);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Batches and the objective

/// Network-ready tensors of one training batch. Row i of both streams shares labels[i].
struct Batch {
  Tensor optical, sar, prior;
  std::vector<int> labels;
  std::vector<BinaryMask> mask_opt, mask_sar;
  std::vector<std::string> ids;
};

/// Augments every sample (one draw per sample, applied to both the network
/// input and the pseudo-label source) and builds masks and tensors.
inline Batch make_batch(const Dataset& ds, const PkBatch& pk, const RunConfig& cfg, Rng& aug_rng, bool augment = true) {
  Batch b;
  b.labels = pk.labels;
  const std::size_t n = pk.optical.size();
  std::vector<RgbImage> opt(n);
  std::vector<GrayImage> sar(n);
  std::vector<BinaryMask> harris(n);
  imgproc::HarrisParams hp;
  hp.quantile = cfg.harris_quantile;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& so = ds.samples[pk.optical[i]];
    const Sample& ss = ds.samples[pk.sar[i]];
    b.ids.push_back(so.record.id);
    b.ids.push_back(ss.record.id);
    const auto d_opt = augment ? synth::draw_augment(so.optical.height, so.optical.width, aug_rng)
                               : synth::AugmentDraw::identity(10);
    const auto d_sar = augment ? synth::draw_augment(ss.sar.height, ss.sar.width, aug_rng) : synth::AugmentDraw::identity(10);
    opt[i] = synth::apply_augment(so.optical, d_opt);
    sar[i] = synth::apply_augment(ss.sar, d_sar);
    const RgbImage src_opt = cfg.pseudo_from_preprocessed ? opt[i] : synth::apply_augment(so.optical_raw, d_opt);
    const GrayImage src_sar = cfg.pseudo_from_preprocessed ? sar[i] : synth::apply_augment(ss.sar_raw, d_sar);
    b.mask_opt.push_back(imgproc::sobel_mask(imgproc::luma(src_opt), cfg.sobel_quantile));
    harris[i] = imgproc::harris_mask(src_sar, hp);
    b.mask_sar.push_back(harris[i]);
  }
  std::vector<const RgbImage*> po;
  std::vector<const GrayImage*> ps;
  for (std::size_t i = 0; i < n; ++i) {
    po.push_back(&opt[i]);
    ps.push_back(&sar[i]);
  }
  b.optical = images_to_tensor(po, {});
  b.sar = images_to_tensor({}, ps);
  b.prior = prior_tensor(ps, harris);
  return b;
}

struct LossBreakdown {
  Tensor total;  // differentiable scalar
  double l_id = 0.0, l_tri = 0.0, l_gcc = 0.0, value = 0.0;
  std::size_t triplet_anchors = 0;
  bool triplet_degenerate = false;
};

struct VariantFlags {
  bool use_gfi = true;
  bool use_gcc = true;
};

/// Both streams through the network, then L_id + lambda_tri L_tri + lambda_gcc L_gcc.
/// Identity loss uses the BN-neck logits; the triplet loss uses the pre-neck embedding.
inline LossBreakdown compute_objective(model::GeoMamba& net, const Batch& b, const losses::LossWeights& w,
                                       VariantFlags flags, model::GfiPairing pairing) {
  model::ForwardOptions fo;
  fo.training = true;
  fo.use_gfi = flags.use_gfi;
  fo.use_ds = flags.use_gcc;
  fo.pairing = pairing;
  const auto out = net.forward({&b.optical, &b.sar, &b.prior}, fo);
  std::vector<int> labels = b.labels;
  labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  const Tensor logits = concat({out.optical->logits, out.sar->logits}, 0);
  const Tensor feats = concat({out.optical->embedding, out.sar->embedding}, 0);

  LossBreakdown r;
  const Tensor l_id = losses::identity_loss(logits, labels, w.label_smoothing);
  const auto tri = losses::triplet_loss(feats, labels, w.margin);
  r.triplet_anchors = tri.valid_anchors;
  r.triplet_degenerate = tri.degenerate;
  r.total = losses::retrieval_loss(l_id, tri.loss, w.lambda_tri);
  r.l_id = l_id.item();
  r.l_tri = tri.loss.item();
  if (flags.use_gcc) {
    const auto gcc = losses::gcc_loss({out.optical->mask_shallow, out.optical->mask_deep, out.sar->mask_shallow,
                                       out.sar->mask_deep},
                                      b.mask_opt, b.mask_sar, w);
    r.total = losses::total_loss(r.total, gcc.total, w.lambda_gcc);
    r.l_gcc = gcc.total.item();
  }
  r.value = r.total.item();
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled-weight-decay Adam with bias correction. Parameters without a
/// gradient in a step are left untouched (no decay either).
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    bool decay = true;
    std::vector<double> m, v;
  };

  AdamW() = default;
  explicit AdamW(AdamWOptions opt) : opt_(opt) {}

  void add(const std::string& name, Tensor param, bool decay) {
    slots_.push_back({name, param, decay, std::vector<double>(param.numel(), 0.0), std::vector<double>(param.numel(), 0.0)});
  }

  /// Every trainable store entry; weights of rank >= 2 are decayed, vectors (biases, norms) are not.
  void add_all(nn::ParamStore& ps) {
    for (auto& e : ps.entries())
      if (e.trainable) add(e.name, e.tensor, e.tensor.ndim() >= 2);
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      if (!s.param.requires_grad() || !s.param.has_grad()) continue;
      auto p = s.param.mutable_data();
      const auto g = s.param.grad();
      const double decay = s.decay ? 1.0 - lr * opt_.weight_decay : 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * g[i];
        s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double m_hat = s.m[i] / bc1, v_hat = s.v[i] / bc2;
        p[i] = p[i] * decay - lr * m_hat / (std::sqrt(v_hat) + opt_.eps);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }

  void save(ckpt::Checkpoint& c) const {
    c.meta["adam_step"] = t_;
    for (const auto& s : slots_) {
      c.arrays.push_back({"adam.m." + s.name, s.param.shape(), s.m});
      c.arrays.push_back({"adam.v." + s.name, s.param.shape(), s.v});
    }
  }

  void load(const ckpt::Checkpoint& c) {
    t_ = c.meta.at("adam_step").get<std::size_t>();
    for (auto& s : slots_) {
      const auto* m = c.find("adam.m." + s.name);
      const auto* v = c.find("adam.v." + s.name);
      if (!m || !v || m->data.size() != s.m.size() || v->data.size() != s.v.size())
        throw IoError("checkpoint lacks optimizer state for '" + s.name + "'");
      s.m = m->data;
      s.v = v->data;
    }
  }

 private:
  AdamWOptions opt_{};
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

/// Linear warmup over the first warmup_fraction of steps, then cosine decay to zero.
inline double lr_at(std::size_t step, std::size_t total_steps, double base, double warmup_fraction) {
  if (total_steps == 0) return base;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double grad_norm(const nn::ParamStore& ps) {
  double s = 0.0;
  for (const auto& e : ps.entries())
    if (e.trainable && e.tensor.has_grad())
      for (double g : e.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Embedding export

/// Pre-neck embeddings of one split, one stream at a time, in eval mode.
/// GFI (when enabled) runs with each stream as its own partner, so the result
/// does not depend on batch composition.
inline eval::EmbeddingSet embed_split(model::GeoMamba& net, const Dataset& ds, synth::Split split, const RunConfig& cfg,
                                      bool use_gfi, std::size_t chunk = 32) {
  NoGradGuard no_grad;
  eval::EmbeddingSet set;
  set.dim = net.config().embed_dim;
  const auto idx = ds.split_indices(split);
  imgproc::HarrisParams hp;
  hp.quantile = cfg.harris_quantile;
  model::ForwardOptions fo;
  fo.training = false;
  fo.use_gfi = use_gfi;
  fo.use_ds = false;
  fo.pairing = model::GfiPairing::kSelf;
  for (Modality m : {Modality::kOptical, Modality::kSar}) {
    std::vector<std::size_t> rows;
    for (auto i : idx)
      if (ds.samples[i].modality == m) rows.push_back(i);
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
      const std::size_t end = std::min(rows.size(), start + chunk);
      std::vector<const RgbImage*> po;
      std::vector<const GrayImage*> ps;
      std::vector<BinaryMask> harris;
      for (std::size_t r = start; r < end; ++r) {
        const Sample& s = ds.samples[rows[r]];
        if (m == Modality::kOptical) {
          po.push_back(&s.optical);
        } else {
          ps.push_back(&s.sar);
          harris.push_back(imgproc::harris_mask(cfg.pseudo_from_preprocessed ? s.sar : s.sar_raw, hp));
        }
      }
      model::ForwardOutput out;
      if (m == Modality::kOptical) {
        const Tensor x = images_to_tensor(po, {});
        out = net.forward({&x, nullptr, nullptr}, fo);
      } else {
        const Tensor x = images_to_tensor({}, ps);
        const Tensor pr = prior_tensor(ps, harris);
        out = net.forward({nullptr, &x, &pr}, fo);
      }
      const Tensor& f = m == Modality::kOptical ? out.optical->embedding : out.sar->embedding;
      for (std::size_t r = start; r < end; ++r) {
        const auto& rec = ds.samples[rows[r]].record;
        set.push_back(rec.id, rec.label, rec.modality, synth::split_name(split), f.data().data() + (r - start) * set.dim);
      }
    }
  }
  return set;
}

inline std::vector<eval::Metrics> evaluate_all(const eval::EmbeddingSet& query, const eval::EmbeddingSet& gallery,
                                               std::size_t block_size) {
  std::vector<eval::Metrics> out;
  eval::EvalOptions eo;
  eo.block_size = block_size;
  for (auto p : {eval::Protocol::kAllToAll, eval::Protocol::kOptToSar, eval::Protocol::kSarToOpt})
    out.push_back(eval::evaluate(query, gallery, eval::protocol_spec(p), eo));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop and run directory

struct StepLog {
  std::size_t step = 0, epoch = 0;
  double lr = 0.0;
  double l_id = 0.0, l_tri = 0.0, l_gcc = 0.0, total = 0.0;
  double grad_norm = 0.0;
  bool cross_pairing = false;
  bool with_replacement = false;
};

inline const char* step_csv_header() {
  return "step,epoch,lr,l_id,l_tri,l_gcc,lambda_tri,lambda_gcc,total,grad_norm,cross_pairing,with_replacement";
}

inline std::string rng_state(const Rng& r) {
  std::ostringstream ss;
  ss << r;
  return ss.str();
}

inline void set_rng_state(Rng& r, const std::string& s) {
  std::istringstream ss(s);
  ss >> r;
  if (!ss) throw IoError("checkpoint has a malformed rng state");
}

struct RunResult {
  std::vector<eval::Metrics> metrics;
  std::string checkpoint_hash;
  std::size_t steps = 0;
  bool resumed = false;
};

/// Owns model, optimizer and generators of one training run.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Dataset& ds)
      : cfg_(cfg),
        ds_(ds),
        index_(ds),
        net_(cfg.model_config(ds.num_classes), cfg.seed),
        opt_({cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}),
        sampler_rng_(make_stream(cfg.seed, StreamTag::kSampler)),
        aug_rng_(make_stream(cfg.seed, StreamTag::kAugment)),
        pair_rng_(make_stream(cfg.seed, StreamTag::kGfiPairing)) {
    cfg_.validate();
    if (cfg_.freeze_prior) net_.params().set_trainable_prefix("prior.", false);
    opt_.add_all(net_.params());
    steps_per_epoch_ = std::max<std::size_t>(1, (ds.split_indices(synth::Split::kTrain).size() + cfg.batch_size() - 1) /
                                                     cfg.batch_size());
  }

  model::GeoMamba& model() noexcept { return net_; }
  const RunConfig& config() const noexcept { return cfg_; }
  std::size_t step() const noexcept { return step_; }
  std::size_t steps_per_epoch() const noexcept { return steps_per_epoch_; }
  std::size_t total_steps() const noexcept { return steps_per_epoch_ * cfg_.epochs; }

  /// GCC is active only when enabled with a positive weight, so a zero weight
  /// reproduces the run without GCC exactly.
  VariantFlags flags() const { return {cfg_.use_gfi, cfg_.use_gcc && cfg_.loss.lambda_gcc > 0.0}; }

  /// One optimization step; throws NumericalError (after writing `dump_path`) on a non-finite loss.
  StepLog train_step(const std::string& dump_path = "") {
    const PkBatch pk = pk_sample(index_, cfg_.p_classes, cfg_.k_instances, sampler_rng_);
    const Batch batch = make_batch(ds_, pk, cfg_, aug_rng_);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const bool cross = u01(pair_rng_) >= cfg_.gfi_self_pair_prob;
    const auto pairing = cross ? model::GfiPairing::kCross : model::GfiPairing::kSelf;

    net_.params().zero_grad();
    LossBreakdown loss = compute_objective(net_, batch, cfg_.loss, flags(), pairing);
    StepLog log;
    log.step = step_;
    log.epoch = step_ / steps_per_epoch_;
    log.lr = lr_at(step_, total_steps(), cfg_.lr, cfg_.warmup_fraction);
    log.l_id = loss.l_id;
    log.l_tri = loss.l_tri;
    log.l_gcc = loss.l_gcc;
    log.total = loss.value;
    log.cross_pairing = cross;
    log.with_replacement = pk.with_replacement;
    if (!std::isfinite(loss.value)) fail_numerical("loss", log, batch, dump_path);
    backward(loss.total);
    log.grad_norm = grad_norm(net_.params());
    if (!std::isfinite(log.grad_norm)) fail_numerical("gradient", log, batch, dump_path);
    opt_.step(log.lr);
    ++step_;
    return log;
  }

  ckpt::Checkpoint checkpoint() const {
    ckpt::Checkpoint c;
    c.meta["config"] = cfg_.to_text();
    c.meta["step"] = step_;
    c.meta["num_classes"] = ds_.num_classes;
    c.meta["rng_sampler"] = rng_state(sampler_rng_);
    c.meta["rng_augment"] = rng_state(aug_rng_);
    c.meta["rng_pairing"] = rng_state(pair_rng_);
    ckpt::add_params(c, net_.params());
    opt_.save(c);
    return c;
  }

  void restore(const ckpt::Checkpoint& c) {
    ckpt::load_params(c, net_.params());
    opt_.load(c);
    step_ = c.meta.at("step").get<std::size_t>();
    set_rng_state(sampler_rng_, c.meta.at("rng_sampler").get<std::string>());
    set_rng_state(aug_rng_, c.meta.at("rng_augment").get<std::string>());
    set_rng_state(pair_rng_, c.meta.at("rng_pairing").get<std::string>());
  }

 private:
  [[noreturn]] void fail_numerical(const char* what, const StepLog& log, const Batch& batch, const std::string& dump_path) {
    if (!dump_path.empty()) {
      std::ofstream f(dump_path);
      f << nlohmann::json{{"step", log.step},   {"epoch", log.epoch}, {"l_id", log.l_id}, {"l_tri", log.l_tri},
                          {"l_gcc", log.l_gcc}, {"total", log.total}, {"batch_ids", batch.ids}}
               .dump(2)
        << '\n';
    }
    throw NumericalError(std::string("non-finite ") + what + " at step " + std::to_string(log.step) +
                         (dump_path.empty() ? "" : " (batch dumped to " + dump_path + ")"));
  }

  RunConfig cfg_;
  const Dataset& ds_;
  LabelIndex index_;
  model::GeoMamba net_;
  AdamW opt_;
  Rng sampler_rng_, aug_rng_, pair_rng_;
  std::size_t step_ = 0;
  std::size_t steps_per_epoch_ = 1;
};

inline std::string step_csv_row(const StepLog& s, const losses::LossWeights& w, bool gcc_active) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d", s.step, s.epoch, s.lr,
                s.l_id, s.l_tri, s.l_gcc, w.lambda_tri, gcc_active ? w.lambda_gcc : 0.0, s.total, s.grad_norm,
                s.cross_pairing ? 1 : 0, s.with_replacement ? 1 : 0);
  return buf;
}

struct RunOptions {
  bool resume = false;
  bool quiet = false;
};

/// Trains into `run_dir`, exporting embeddings and metrics at the end.
///
/// A directory that already holds a run is only reused with `resume`, and only
/// when its config snapshot matches; otherwise this refuses.
/// Loss curves (total and components per step) read back from a step log.
inline std::string loss_curve_svg(const std::string& log_path) {
  std::ifstream in(log_path);
  if (!in) throw IoError("cannot read '" + log_path + "'");
  std::string line;
  std::getline(in, line);
  svg::Series total{"total", {}, {}}, id{"L_id", {}, {}}, tri{"L_tri", {}, {}}, gcc{"L_GCC", {}, {}};
  while (std::getline(in, line)) {
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
    if (v.size() < 9) continue;
    const double step = v[0];
    for (auto [series, col] : {std::pair{&id, 3}, {&tri, 4}, {&gcc, 5}, {&total, 8}}) {
      series->x.push_back(step);
      series->y.push_back(v[col]);
    }
  }
  return svg::line_chart("Training loss", "step", "loss", {total, id, tri, gcc});
}

inline RunResult run_training(const RunConfig& cfg, const Dataset& ds, const std::string& run_dir,
                              const RunOptions& ro = {}) {
  namespace fs = std::filesystem;
  if (cfg.deterministic) openblas_set_num_threads(1);
  const fs::path dir(run_dir);
  const fs::path config_path = dir / "config.txt", log_path = dir / "metrics_steps.csv", last = dir / "checkpoint_last.ckpt";
  RunResult result;

  Trainer trainer(cfg, ds);
  std::error_code ec;
  if (fs::exists(config_path)) {
    if (!ro.resume)
      throw UsageError("run directory '" + run_dir + "' already holds a run; pass --resume to continue it or choose another --out");
    const RunConfig stored = load_config(config_path.string());
    if (stored.to_text() != cfg.to_text())
      throw UsageError("run directory '" + run_dir + "' was created with a different config; refusing to resume");
    if (fs::exists(last)) {
      trainer.restore(ckpt::load(last.string()));
      result.resumed = true;
    }
  } else {
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory '" + run_dir + "': " + ec.message());
    std::ofstream f(config_path);
    if (!f) throw IoError("cannot write '" + config_path.string() + "'");
    f << cfg.to_text();
  }

  // Drop log rows past the restored step so that a resumed log matches an uninterrupted one.
  std::vector<std::string> kept;
  if (result.resumed && fs::exists(log_path)) {
    std::ifstream in(log_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line) && kept.size() < trainer.step()) kept.push_back(line);
  }
  {
    std::ofstream out(log_path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + log_path.string() + "'");
    out << step_csv_header() << '\n';
    for (const auto& l : kept) out << l << '\n';
  }
  std::ofstream log(log_path, std::ios::app);

  const auto t0 = std::chrono::steady_clock::now();
  const std::string dump = (dir / "nan_dump.json").string();
  while (trainer.step() < trainer.total_steps()) {
    const StepLog s = trainer.train_step(dump);
    log << step_csv_row(s, cfg.loss, trainer.flags().use_gcc) << '\n';
    log.flush();
    const bool epoch_end = (s.step + 1) % trainer.steps_per_epoch() == 0;
    if (epoch_end) {
      const std::size_t epoch = (s.step + 1) / trainer.steps_per_epoch();
      ckpt::save(last.string(), trainer.checkpoint());
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
        ckpt::save((dir / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt")).string(), trainer.checkpoint());
      if (!ro.quiet) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "[train] epoch %zu/%zu step %zu loss %.4f (id %.4f tri %.4f gcc %.4f) %.1fs\n", epoch,
                     cfg.epochs, s.step + 1, s.total, s.l_id, s.l_tri, s.l_gcc, secs);
      }
    }
  }
  result.steps = trainer.step();
  result.checkpoint_hash = ckpt::save((dir / "checkpoint_final.ckpt").string(), trainer.checkpoint());
  ckpt::save(last.string(), trainer.checkpoint());

  const auto query = embed_split(trainer.model(), ds, synth::Split::kQuery, cfg, cfg.use_gfi);
  const auto gallery = embed_split(trainer.model(), ds, synth::Split::kGallery, cfg, cfg.use_gfi);
  eval::write_embeddings((dir / "query_embeddings.bin").string(), (dir / "query_embeddings.jsonl").string(), query);
  eval::write_embeddings((dir / "gallery_embeddings.bin").string(), (dir / "gallery_embeddings.jsonl").string(), gallery);
  result.metrics = evaluate_all(query, gallery, cfg.eval_block_size);
  eval::write_metrics((dir / "metrics.json").string(), (dir / "metrics.csv").string(), result.metrics);
  if (cfg.ranked_dump > 0) {
    std::vector<eval::QueryResult> details;
    const auto proto = eval::protocol_spec(eval::parse_protocol(cfg.protocol));
    eval::evaluate(query, gallery, proto, {cfg.eval_block_size, cfg.ranked_dump}, &details);
    eval::write_ranked_lists((dir / ("ranked_" + proto.name + ".jsonl")).string(), query, gallery, details);
  }
  log.close();
  svg::write_file((dir / "loss_curve.svg").string(), loss_curve_svg(log_path.string()));
  {
    std::ofstream h(dir / "checkpoint_final.fnv1a");
    h << result.checkpoint_hash << '\n';
  }
  return result;
}

/// Rebuilds a model from a checkpoint written by run_training.
inline model::GeoMamba load_model(const ckpt::Checkpoint& c, RunConfig* cfg_out = nullptr) {
  const RunConfig cfg = parse_config_text(c.meta.at("config").get<std::string>());
  model::GeoMamba net(cfg.model_config(c.meta.at("num_classes").get<std::size_t>()), cfg.seed);
  ckpt::load_params(c, net.params());
  if (cfg_out) *cfg_out = cfg;
  return net;
}

}  // namespace geomamba::train
