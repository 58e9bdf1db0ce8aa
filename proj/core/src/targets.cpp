#include "prat/targets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prat/ops.hpp"

namespace prat::targets {

using namespace prat::ops;

std::string family_name(ArchFamily f) {
  switch (f) {
    case ArchFamily::MiniRes: return "minires";
    case ArchFamily::MiniDense: return "minidense";
    case ArchFamily::MiniIncep: return "miniincep";
  }
  throw ConfigError("unknown architecture family");
}

ArchFamily family_from_name(const std::string& name) {
  if (name == "minires") return ArchFamily::MiniRes;
  if (name == "minidense") return ArchFamily::MiniDense;
  if (name == "miniincep") return ArchFamily::MiniIncep;
  throw ConfigError("unknown architecture family '" + name + "'");
}

namespace {

int scaled(int base, float width) {
  int c = static_cast<int>(std::lround(base * width / 4.0)) * 4;
  return std::max(4, c);
}

void validate(const ArchitectureSpec& s) {
  if (s.depth < 1 || s.depth > 4) throw ConfigError("target depth must be in [1,4]");
  if (s.width < 0.25f || s.width > 4.f) throw ConfigError("target width must be in [0.25,4]");
  if (s.classes < 2) throw ConfigError("target needs >= 2 classes");
  if (s.image_size < 8 || s.image_size % 4 != 0) {
    throw ConfigError("target image size must be a multiple of 4, >= 8");
  }
}

}  // namespace

ClassifierModel::ClassifierModel(const ArchitectureSpec& spec, uint64_t seed) : spec_(spec) {
  validate(spec);
  build(seed);
  norm_scale_ = params_.add("norm.scale", Tensor::full({3}, 1.f), false);
  norm_shift_ = params_.add("norm.shift", Tensor::zeros({3}), false);
}

void ClassifierModel::build(uint64_t seed) {
  Rng rng(seed, 0x7a);
  const float w = spec_.width;
  const int depth = spec_.depth;
  int head_in = 0;
  switch (spec_.family) {
    case ArchFamily::MiniRes: {
      const int c1 = scaled(16, w), c2 = scaled(32, w);
      stem_ = nn::Conv2d(params_, "stem", 3, c1, 3, 2, 1, false, rng);
      stem_bn_ = nn::BatchNorm2d(params_, "stem.bn", c1);
      for (int i = 0; i < depth; ++i) {
        ResBlock b;
        const std::string p = "stage1.block" + std::to_string(i);
        b.c1 = nn::Conv2d(params_, p + ".c1", c1, c1, 3, 1, 1, false, rng);
        b.b1 = nn::BatchNorm2d(params_, p + ".bn1", c1);
        b.c2 = nn::Conv2d(params_, p + ".c2", c1, c1, 3, 1, 1, false, rng);
        b.b2 = nn::BatchNorm2d(params_, p + ".bn2", c1);
        res_stage1_.push_back(std::move(b));
      }
      res_down_ = nn::Conv2d(params_, "down", c1, c2, 3, 2, 1, false, rng);
      res_down_bn_ = nn::BatchNorm2d(params_, "down.bn", c2);
      for (int i = 0; i < depth; ++i) {
        ResBlock b;
        const std::string p = "stage2.block" + std::to_string(i);
        b.c1 = nn::Conv2d(params_, p + ".c1", c2, c2, 3, 1, 1, false, rng);
        b.b1 = nn::BatchNorm2d(params_, p + ".bn1", c2);
        b.c2 = nn::Conv2d(params_, p + ".c2", c2, c2, 3, 1, 1, false, rng);
        b.b2 = nn::BatchNorm2d(params_, p + ".bn2", c2);
        res_stage2_.push_back(std::move(b));
      }
      head_in = c2;
      break;
    }
    case ArchFamily::MiniDense: {
      const int c0 = scaled(16, w);
      const int growth = scaled(8, w);
      const int layers = depth + 2;
      stem_ = nn::Conv2d(params_, "stem", 3, c0, 3, 2, 1, false, rng);
      stem_bn_ = nn::BatchNorm2d(params_, "stem.bn", c0);
      int c = c0;
      for (int i = 0; i < layers; ++i) {
        DenseLayer l;
        const std::string p = "block1.layer" + std::to_string(i);
        l.bn = nn::BatchNorm2d(params_, p + ".bn", c);
        l.conv = nn::Conv2d(params_, p + ".conv", c, growth, 3, 1, 1, false, rng);
        dense_block1_.push_back(std::move(l));
        c += growth;
      }
      const int ct = (c / 2 / 2) * 2;
      dense_trans_bn_ = nn::BatchNorm2d(params_, "trans.bn", c);
      dense_trans_ = nn::Conv2d(params_, "trans.conv", c, ct, 1, 1, 0, false, rng);
      c = ct;
      for (int i = 0; i < layers; ++i) {
        DenseLayer l;
        const std::string p = "block2.layer" + std::to_string(i);
        l.bn = nn::BatchNorm2d(params_, p + ".bn", c);
        l.conv = nn::Conv2d(params_, p + ".conv", c, growth, 3, 1, 1, false, rng);
        dense_block2_.push_back(std::move(l));
        c += growth;
      }
      dense_head_bn_ = nn::BatchNorm2d(params_, "head.bn", c);
      head_in = c;
      break;
    }
    case ArchFamily::MiniIncep: {
      const int c0 = scaled(16, w);
      const int u = scaled(4, w);
      stem_ = nn::Conv2d(params_, "stem", 3, c0, 3, 2, 1, false, rng);
      stem_bn_ = nn::BatchNorm2d(params_, "stem.bn", c0);
      auto make_module = [&](const std::string& p, int cin) {
        IncepModule m;
        m.p1 = nn::Conv2d(params_, p + ".b1.conv", cin, 2 * u, 1, 1, 0, false, rng);
        m.p1bn = nn::BatchNorm2d(params_, p + ".b1.bn", 2 * u);
        m.p3a = nn::Conv2d(params_, p + ".b3.reduce", cin, 2 * u, 1, 1, 0, false, rng);
        m.p3abn = nn::BatchNorm2d(params_, p + ".b3.reduce_bn", 2 * u);
        m.p3b = nn::Conv2d(params_, p + ".b3.conv", 2 * u, 3 * u, 3, 1, 1, false, rng);
        m.p3bbn = nn::BatchNorm2d(params_, p + ".b3.bn", 3 * u);
        m.p5a = nn::Conv2d(params_, p + ".b5.reduce", cin, u, 1, 1, 0, false, rng);
        m.p5abn = nn::BatchNorm2d(params_, p + ".b5.reduce_bn", u);
        m.p5b = nn::Conv2d(params_, p + ".b5.conv", u, 2 * u, 5, 1, 2, false, rng);
        m.p5bbn = nn::BatchNorm2d(params_, p + ".b5.bn", 2 * u);
        return m;
      };
      int c = c0;
      for (int i = 0; i < depth; ++i) {
        incep_stage1_.push_back(make_module("stage1.mod" + std::to_string(i), c));
        c = 7 * u;
      }
      const int cr = scaled(40, w);
      incep_reduce_ = nn::Conv2d(params_, "reduce", c, cr, 3, 2, 1, false, rng);
      incep_reduce_bn_ = nn::BatchNorm2d(params_, "reduce.bn", cr);
      c = cr;
      for (int i = 0; i < depth; ++i) {
        incep_stage2_.push_back(make_module("stage2.mod" + std::to_string(i), c));
        c = 7 * u;
      }
      head_in = c;
      break;
    }
  }
  head_ = nn::Linear(params_, "head.fc", head_in, spec_.classes, true, rng);
}

Tensor ClassifierModel::backbone(const Tensor& x, bool training) {
  Tensor h = gelu(stem_bn_.forward(stem_.forward(x), training));
  switch (spec_.family) {
    case ArchFamily::MiniRes: {
      for (auto& b : res_stage1_) {
        Tensor y = b.b2.forward(b.c2.forward(gelu(b.b1.forward(b.c1.forward(h), training))),
                                training);
        h = gelu(add(y, h));
      }
      h = gelu(res_down_bn_.forward(res_down_.forward(h), training));
      for (auto& b : res_stage2_) {
        Tensor y = b.b2.forward(b.c2.forward(gelu(b.b1.forward(b.c1.forward(h), training))),
                                training);
        h = gelu(add(y, h));
      }
      break;
    }
    case ArchFamily::MiniDense: {
      for (auto& l : dense_block1_) {
        Tensor y = l.conv.forward(gelu(l.bn.forward(h, training)));
        h = concat_channels(h, y);
      }
      h = dense_trans_.forward(gelu(dense_trans_bn_.forward(h, training)));
      h = avg_pool2d(h, 2);
      for (auto& l : dense_block2_) {
        Tensor y = l.conv.forward(gelu(l.bn.forward(h, training)));
        h = concat_channels(h, y);
      }
      h = gelu(dense_head_bn_.forward(h, training));
      break;
    }
    case ArchFamily::MiniIncep: {
      auto run_module = [&](IncepModule& m, const Tensor& in) {
        Tensor b1 = gelu(m.p1bn.forward(m.p1.forward(in), training));
        Tensor b3 = gelu(m.p3abn.forward(m.p3a.forward(in), training));
        b3 = gelu(m.p3bbn.forward(m.p3b.forward(b3), training));
        Tensor b5 = gelu(m.p5abn.forward(m.p5a.forward(in), training));
        b5 = gelu(m.p5bbn.forward(m.p5b.forward(b5), training));
        return concat_channels(concat_channels(b1, b3), b5);
      };
      for (auto& m : incep_stage1_) h = run_module(m, h);
      h = gelu(incep_reduce_bn_.forward(incep_reduce_.forward(h), training));
      for (auto& m : incep_stage2_) h = run_module(m, h);
      break;
    }
  }
  return head_.forward(global_avg_pool(h));
}

Tensor ClassifierModel::forward(const Tensor& x01, bool training) {
  if (x01.rank() != 4 || x01.dim(1) != 3) {
    throw DimensionError("ClassifierModel::forward: need [N,3,H,W], got " +
                         shape_str(x01.shape()));
  }
  Tensor x = channel_affine(x01, norm_scale_, norm_shift_);
  return backbone(x, training);
}

Tensor ClassifierModel::traced_logits(const Tensor& x01) { return forward(x01, false); }

PredictOut ClassifierModel::predict(const Tensor& image) const {
  Tensor batch;
  if (image.rank() == 3) {
    NoGradGuard ng;
    batch = ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  } else if (image.rank() == 4) {
    batch = image;
  } else {
    throw DimensionError("predict: need [3,H,W] or [N,3,H,W]");
  }
  const float* p = batch.ptr();
  for (int64_t i = 0; i < batch.size(); ++i) {
    if (p[i] < -1e-6f || p[i] > 1.f + 1e-6f) {
      throw ContractError("predict: pixel " + std::to_string(p[i]) + " outside [0,1]");
    }
  }
  Tensor logits = logits_nograd(batch);
  const int classes = logits.dim(1);
  Tensor row = Tensor::zeros({classes});
  std::copy_n(logits.ptr(), classes, row.mutable_ptr());
  row.check_finite("predict logits");
  int best = 0;
  for (int i = 1; i < classes; ++i) {
    if (row.ptr()[i] > row.ptr()[best]) best = i;
  }
  return {row, best};
}

Tensor ClassifierModel::logits_nograd(const Tensor& batch) const {
  NoGradGuard ng;
  auto* self = const_cast<ClassifierModel*>(this);
  return self->forward(batch, false);
}

void ClassifierModel::set_normalization(const std::vector<float>& mean,
                                        const std::vector<float>& std) {
  if (mean.size() != 3 || std.size() != 3) throw ConfigError("normalization needs 3 channels");
  for (int c = 0; c < 3; ++c) {
    if (std[static_cast<size_t>(c)] <= 0) throw ConfigError("normalization std must be > 0");
    norm_scale_.mutable_ptr()[c] = 1.f / std[static_cast<size_t>(c)];
    norm_shift_.mutable_ptr()[c] = -mean[static_cast<size_t>(c)] / std[static_cast<size_t>(c)];
  }
}

void ClassifierModel::save(const std::filesystem::path& path, const io::Metadata& extra) const {
  io::Metadata meta = extra;
  meta["family"] = family_name(spec_.family);
  meta["depth"] = std::to_string(spec_.depth);
  meta["width"] = std::to_string(spec_.width);
  meta["classes"] = std::to_string(spec_.classes);
  meta["image_size"] = std::to_string(spec_.image_size);
  meta["model_id"] = std::to_string(model_id);
  io::write_checkpoint(path, "PRM1", meta, params_);
}

ClassifierModel ClassifierModel::load(const std::filesystem::path& path) {
  const io::Metadata meta = io::read_checkpoint_meta(path, "PRM1");
  ArchitectureSpec spec;
  spec.family = family_from_name(meta.at("family"));
  spec.depth = std::stoi(meta.at("depth"));
  spec.width = std::stof(meta.at("width"));
  spec.classes = std::stoi(meta.at("classes"));
  spec.image_size = std::stoi(meta.at("image_size"));
  ClassifierModel model(spec, 0);
  io::read_checkpoint(path, "PRM1", model.params_);
  model.model_id = std::stoi(meta.at("model_id"));
  model.set_trainable(false);
  return model;
}

ClassifierModel build_target(const ArchitectureSpec& spec, uint64_t seed) {
  return ClassifierModel(spec, seed);
}

double accuracy(const ClassifierModel& model, const LabeledImages& data) {
  if (data.count() == 0) throw EvalError("accuracy: empty dataset");
  const int n = data.count();
  const int bs = 64;
  int correct = 0;
  for (int i = 0; i < n; i += bs) {
    const int m = std::min(bs, n - i);
    const int64_t stride = data.images.size() / n;
    Tensor batch = Tensor::zeros({m, 3, data.images.dim(2), data.images.dim(3)});
    std::copy_n(data.images.ptr() + i * stride, m * stride, batch.mutable_ptr());
    Tensor logits = model.logits_nograd(batch);
    const int classes = logits.dim(1);
    for (int r = 0; r < m; ++r) {
      const float* row = logits.ptr() + static_cast<int64_t>(r) * classes;
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best == data.labels[static_cast<size_t>(i + r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

TargetTrainStats train_target(ClassifierModel& model, const LabeledImages& train,
                              const LabeledImages& test, const TargetTrainConfig& cfg) {
  if (train.count() == 0) throw ConfigError("train_target: empty training set");
  if (cfg.epochs < 0 || cfg.batch < 1 || cfg.lr <= 0) {
    throw ConfigError("train_target: bad config");
  }
  const int n = train.count();
  const int hw = train.images.dim(2) * train.images.dim(3);
  const int64_t stride = static_cast<int64_t>(3) * hw;

  // per-channel normalization constants from the training split
  {
    std::vector<float> mean(3, 0.f), sd(3, 0.f);
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int i = 0; i < n; ++i) {
        const float* p = train.images.ptr() + i * stride + c * hw;
        for (int j = 0; j < hw; ++j) s += p[j];
      }
      const double mu = s / (static_cast<double>(n) * hw);
      double sv = 0;
      for (int i = 0; i < n; ++i) {
        const float* p = train.images.ptr() + i * stride + c * hw;
        for (int j = 0; j < hw; ++j) {
          const double d = p[j] - mu;
          sv += d * d;
        }
      }
      mean[static_cast<size_t>(c)] = static_cast<float>(mu);
      sd[static_cast<size_t>(c)] = static_cast<float>(
          std::max(1e-3, std::sqrt(sv / (static_cast<double>(n) * hw))));
    }
    model.set_normalization(mean, sd);
  }

  model.set_trainable(true);
  nn::Adam opt(model.params(), static_cast<float>(cfg.lr));
  opt.set_decay(static_cast<float>(cfg.lr_decay), cfg.decay_every);
  Rng rng(cfg.seed, 0x17);

  TargetTrainStats stats;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    int batches = 0;
    for (int i = 0; i < n; i += cfg.batch) {
      const int m = std::min(cfg.batch, n - i);
      Tensor batch = Tensor::zeros({m, 3, train.images.dim(2), train.images.dim(3)});
      std::vector<int> labels(static_cast<size_t>(m));
      for (int r = 0; r < m; ++r) {
        const int src = order[static_cast<size_t>(i + r)];
        std::copy_n(train.images.ptr() + src * stride, stride,
                    batch.mutable_ptr() + r * stride);
        labels[static_cast<size_t>(r)] = train.labels[static_cast<size_t>(src)];
      }
      Tape tape;
      Tensor logits = model.forward(batch, true);
      Tensor loss = ops::cross_entropy_mean(logits, labels);
      if (!loss.all_finite()) {
        throw TrainingError("train_target: non-finite loss in epoch " + std::to_string(epoch));
      }
      GradientMap grads = backward(loss, tape);
      opt.step(grads);
      epoch_loss += loss.item();
      ++batches;
    }
    stats.epoch_losses.push_back(batches ? epoch_loss / batches : 0.0);
  }
  model.set_trainable(false);
  stats.train_accuracy = accuracy(model, train);
  stats.test_accuracy = test.count() ? accuracy(model, test) : 0.0;
  return stats;
}

}  // namespace prat::targets
