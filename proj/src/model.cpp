#include "sskd/model.hpp"

#include <cmath>

#include "sskd/errors.hpp"
#include "sskd/random.hpp"

namespace sskd {

std::string to_string(Family family) {
  return family == Family::kPlainCnn ? "plain-cnn" : "residual-cnn";
}

Family parse_family(const std::string& text) {
  if (text == "plain-cnn") return Family::kPlainCnn;
  if (text == "residual-cnn") return Family::kResidualCnn;
  throw ConfigError("unknown model family '" + text + "' (expected plain-cnn or residual-cnn)");
}

void ModelConfig::validate() const {
  if (stage_widths.empty()) throw ConfigError("model needs at least one stage");
  if (stage_widths.size() != blocks_per_stage.size()) {
    throw ConfigError("stage_widths has " + std::to_string(stage_widths.size()) + " entries but blocks_per_stage has " +
                      std::to_string(blocks_per_stage.size()));
  }
  for (std::size_t i = 0; i < stage_widths.size(); ++i) {
    if (stage_widths[i] < 1) throw ConfigError("stage " + std::to_string(i + 1) + " width must be positive");
    if (blocks_per_stage[i] < 1) throw ConfigError("stage " + std::to_string(i + 1) + " needs at least one block");
  }
  if (input_channels < 1 || num_classes < 1) throw ConfigError("input_channels and num_classes must be positive");
  if (input_h < 1 || input_w < 1) throw ConfigError("input resolution must be positive");
  if (stem_pool < 1) throw ConfigError("stem_pool must be >= 1");
  const int reduction = stem_pool << (num_stages() - 1);
  if (input_h % reduction != 0 || input_w % reduction != 0) {
    throw ConfigError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " is not divisible by the cumulative stride " + std::to_string(reduction));
  }
}

std::vector<std::pair<int, int>> ModelConfig::stage_resolutions() const {
  validate();
  std::vector<std::pair<int, int>> out;
  int h = input_h / stem_pool, w = input_w / stem_pool;
  for (int i = 0; i < num_stages(); ++i) {
    if (i > 0) {
      h /= 2;
      w /= 2;
    }
    out.emplace_back(h, w);
  }
  return out;
}

ModelConfig desk_teacher_config(int input_hw, int input_channels, int num_classes) {
  ModelConfig c;
  c.family = Family::kResidualCnn;
  c.input_h = c.input_w = input_hw;
  c.input_channels = input_channels;
  c.num_classes = num_classes;
  c.stage_widths = {16, 32, 64, 128};
  c.blocks_per_stage = {2, 2, 2, 2};
  return c;
}

ModelConfig desk_student_config(int input_hw, int input_channels, int num_classes) {
  ModelConfig c = desk_teacher_config(input_hw, input_channels, num_classes);
  c.stage_widths = {8, 16, 32, 64};
  c.blocks_per_stage = {1, 1, 1, 1};
  return c;
}

namespace {

// Input normalization, 3x3 convolution, batch norm, relu, optional max pool.
template <typename T>
class Stem final : public Unit<T> {
 public:
  Stem(int in_channels, int width, int pool)
      : mean_{"stem.input_mean", Tensor<T>(Shape{in_channels}, T(0))},
        std_{"stem.input_std", Tensor<T>(Shape{in_channels}, T(1))},
        conv_("stem.conv", in_channels, width, 3, 1, 1, false),
        bn_("stem.bn", width),
        pool_(pool) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    // Normalization as an inference-mode batch norm with identity affine.
    const int c = mean_.value.dim(0);
    Tensor<T> ones(Shape{c}, T(1)), zeros(Shape{c}, T(0));
    Tensor<T> var(Shape{c});
    for (int i = 0; i < c; ++i) var.data()[i] = std_.value.data()[i] * std_.value.data()[i];
    ops::BatchNormOptions options;
    options.training = false;
    options.eps = 0.0;
    Tensor<T> normalized = ops::batch_norm2d(x, ones, zeros, mean_.value, var, options);
    Tensor<T> y = ops::relu(bn_.forward(conv_.forward(normalized), training));
    if (pool_ > 1) y = ops::max_pool2d(y, pool_, pool_);
    return y;
  }

  void init(std::uint64_t seed) override {
    conv_.init(seed);
    bn_.init();
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    conv_.collect(out);
    bn_.collect(out);
  }

  void collect(std::vector<Buffer<T>*>& out) override {
    out.push_back(&mean_);
    out.push_back(&std_);
    bn_.collect(out);
  }

  void set_normalization(const std::vector<double>& mean, const std::vector<double>& std) {
    if (static_cast<int>(mean.size()) != mean_.value.dim(0) || mean.size() != std.size()) {
      throw DimensionError("normalization statistics do not match " + std::to_string(mean_.value.dim(0)) +
                           " input channels");
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (!(std[i] > 0.0)) throw ValidationError("normalization std must be positive");
      mean_.value.data()[i] = static_cast<T>(mean[i]);
      std_.value.data()[i] = static_cast<T>(std[i]);
    }
  }

 private:
  Buffer<T> mean_;
  Buffer<T> std_;
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  int pool_;
};

// Two 3x3 convolutions with an identity or projected shortcut. A downsampling
// block halves the resolution with a 2x2 stride-2 convolution on the main
// path and 2x2 average pooling on the shortcut.
template <typename T>
class ResidualBlock final : public Unit<T> {
 public:
  ResidualBlock(const std::string& name, int in_channels, int out_channels, bool downsample)
      : conv_a_(name + ".conv1", in_channels, out_channels, downsample ? 2 : 3, downsample ? 2 : 1,
                downsample ? 0 : 1, false),
        bn_a_(name + ".bn1", out_channels),
        conv_b_(name + ".conv2", out_channels, out_channels, 3, 1, 1, false),
        bn_b_(name + ".bn2", out_channels),
        downsample_(downsample) {
    if (in_channels != out_channels) {
      proj_.emplace(name + ".shortcut.conv", in_channels, out_channels, 1, 1, 0, false);
      proj_bn_.emplace(name + ".shortcut.bn", out_channels);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> main = ops::relu(bn_a_.forward(conv_a_.forward(x), training));
    main = bn_b_.forward(conv_b_.forward(main), training);
    Tensor<T> shortcut = downsample_ ? ops::avg_pool2d(x, 2, 2) : x;
    if (proj_) shortcut = proj_bn_->forward(proj_->forward(shortcut), training);
    return ops::relu(ops::add(main, shortcut));
  }

  void init(std::uint64_t seed) override {
    conv_a_.init(seed);
    conv_b_.init(seed);
    bn_a_.init();
    bn_b_.init();
    if (proj_) {
      proj_->init(seed);
      proj_bn_->init();
    }
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    conv_a_.collect(out);
    bn_a_.collect(out);
    conv_b_.collect(out);
    bn_b_.collect(out);
    if (proj_) {
      proj_->collect(out);
      proj_bn_->collect(out);
    }
  }

  void collect(std::vector<Buffer<T>*>& out) override {
    bn_a_.collect(out);
    bn_b_.collect(out);
    if (proj_bn_) proj_bn_->collect(out);
  }

 private:
  Conv2d<T> conv_a_;
  BatchNorm2d<T> bn_a_;
  Conv2d<T> conv_b_;
  BatchNorm2d<T> bn_b_;
  std::optional<Conv2d<T>> proj_;
  std::optional<BatchNorm2d<T>> proj_bn_;
  bool downsample_;
};

// Optional 2x2 max pool, then 3x3 convolution, batch norm, relu.
template <typename T>
class PlainBlock final : public Unit<T> {
 public:
  PlainBlock(const std::string& name, int in_channels, int out_channels, bool downsample)
      : conv_(name + ".conv", in_channels, out_channels, 3, 1, 1, false),
        bn_(name + ".bn", out_channels),
        downsample_(downsample) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> in = downsample_ ? ops::max_pool2d(x, 2, 2) : x;
    return ops::relu(bn_.forward(conv_.forward(in), training));
  }

  void init(std::uint64_t seed) override {
    conv_.init(seed);
    bn_.init();
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    conv_.collect(out);
    bn_.collect(out);
  }

  void collect(std::vector<Buffer<T>*>& out) override { bn_.collect(out); }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool downsample_;
};

}  // namespace

template <typename T>
struct StagedModel<T>::Head {
  Linear<T> fc;
};

std::vector<std::size_t> native_bounds(const ModelConfig& config) {
  config.validate();
  // Unit 0 is the stem, owned by stage 1.
  std::vector<std::size_t> bounds{0};
  std::size_t end = 1;
  for (int blocks : config.blocks_per_stage) {
    end += static_cast<std::size_t>(blocks);
    bounds.push_back(end);
  }
  return bounds;
}

std::vector<std::size_t> repartition_bounds(const std::vector<std::size_t>& native, int n_stages) {
  const int k = static_cast<int>(native.size()) - 1;
  if (n_stages < 1) throw ConfigError("stage count must be >= 1, got " + std::to_string(n_stages));
  if (n_stages == k) return native;
  if (n_stages < k) {
    std::vector<std::size_t> bounds{0};
    bounds.insert(bounds.end(), native.end() - n_stages, native.end());
    return bounds;
  }
  const int splits = n_stages - k;
  if (splits > k) {
    throw ConfigError("cannot split " + std::to_string(k) + " stages into " + std::to_string(n_stages));
  }
  std::vector<std::size_t> bounds{0};
  for (int s = 1; s <= k; ++s) {
    const std::size_t begin = native[s - 1], end = native[s];
    if (s <= splits) {
      const std::size_t units = end - begin;
      if (units < 2) {
        throw ConfigError("stage " + std::to_string(s) + " has a single block and cannot be split to reach " +
                          std::to_string(n_stages) + " stages");
      }
      bounds.push_back(begin + (units + 1) / 2);
    }
    bounds.push_back(end);
  }
  return bounds;
}

template <typename T>
StagedModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  StagedModel<T> model;
  model.config_ = config;
  model.units_ = std::make_shared<std::vector<std::unique_ptr<Unit<T>>>>();
  auto& units = *model.units_;
  units.push_back(std::make_unique<Stem<T>>(config.input_channels, config.stage_widths[0], config.stem_pool));
  int in_channels = config.stage_widths[0];
  int index = 0;
  for (int s = 0; s < config.num_stages(); ++s) {
    for (int b = 0; b < config.blocks_per_stage[s]; ++b) {
      const bool downsample = s > 0 && b == 0;
      const std::string name = "backbone.block" + std::to_string(index++);
      const int width = config.stage_widths[s];
      if (config.family == Family::kResidualCnn) {
        units.push_back(std::make_unique<ResidualBlock<T>>(name, in_channels, width, downsample));
      } else {
        units.push_back(std::make_unique<PlainBlock<T>>(name, in_channels, width, downsample));
      }
      in_channels = width;
    }
  }
  model.head_ = std::make_shared<typename StagedModel<T>::Head>(
      typename StagedModel<T>::Head{Linear<T>("head.fc", in_channels, config.num_classes)});
  model.bounds_ = native_bounds(config);
  for (auto& unit : units) unit->init(seed);
  model.head_->fc.init(seed);
  return model;
}

template StagedModel<float> build_model<float>(const ModelConfig&, std::uint64_t);
template StagedModel<double> build_model<double>(const ModelConfig&, std::uint64_t);

template <typename T>
std::size_t StagedModel<T>::stage_begin(int stage) const {
  if (stage < 1 || stage > num_stages()) {
    throw UsageError("stage " + std::to_string(stage) + " out of range 1.." + std::to_string(num_stages()));
  }
  return bounds_[stage - 1];
}

template <typename T>
std::size_t StagedModel<T>::stage_end(int stage) const {
  stage_begin(stage);
  return bounds_[stage];
}

template <typename T>
void StagedModel<T>::check_input(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.input_channels || x.dim(2) != config_.input_h ||
      x.dim(3) != config_.input_w) {
    throw DimensionError("model expects input [N," + std::to_string(config_.input_channels) + "," +
                         std::to_string(config_.input_h) + "," + std::to_string(config_.input_w) + "], got " +
                         to_string(x.shape()));
  }
}

template <typename T>
Tensor<T> StagedModel<T>::forward_stage(int stage, const Tensor<T>& x, bool training) {
  const std::size_t begin = stage_begin(stage), end = stage_end(stage);
  if (begin == 0) check_input(x);
  Tensor<T> h = x;
  for (std::size_t u = begin; u < end; ++u) h = (*units_)[u]->forward(h, training);
  return h;
}

template <typename T>
StageFeatures<T> StagedModel<T>::forward_stages(const Tensor<T>& x, int upto, bool training) {
  if (upto < 1 || upto > num_stages()) {
    throw UsageError("forward_stages: upto=" + std::to_string(upto) + " outside 1.." + std::to_string(num_stages()));
  }
  StageFeatures<T> out{x, {}};
  Tensor<T> h = x;
  for (int s = 1; s <= upto; ++s) {
    h = forward_stage(s, h, training);
    out.features.push_back(h);
  }
  return out;
}

template <typename T>
Tensor<T> StagedModel<T>::forward_backbone(const Tensor<T>& x, bool training) {
  return forward_stages(x, num_stages(), training).features.back();
}

template <typename T>
Tensor<T> StagedModel<T>::pool_features(const Tensor<T>& f_k) const {
  return ops::global_avg_pool(f_k);
}

template <typename T>
Tensor<T> StagedModel<T>::forward_classifier(const Tensor<T>& pooled) const {
  return head_->fc.forward(pooled);
}

template <typename T>
Tensor<T> StagedModel<T>::forward_head(const Tensor<T>& f_k) const {
  return forward_classifier(pool_features(f_k));
}

template <typename T>
Tensor<T> StagedModel<T>::forward_full(const Tensor<T>& x, bool training) {
  check_input(x);
  return forward_head(forward_backbone(x, training));
}

template <typename T>
std::vector<Parameter<T>*> StagedModel<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  for (auto& unit : *units_) unit->collect(out);
  head_->fc.collect(out);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> StagedModel<T>::parameters_of(OwnerId owner) const {
  if (owner == kHeadOwner) {
    std::vector<Parameter<T>*> out;
    head_->fc.collect(out);
    return out;
  }
  std::vector<Parameter<T>*> out;
  for (std::size_t u = stage_begin(owner); u < stage_end(owner); ++u) (*units_)[u]->collect(out);
  return out;
}

template <typename T>
std::vector<Buffer<T>*> StagedModel<T>::buffers() const {
  std::vector<Buffer<T>*> out;
  for (auto& unit : *units_) unit->collect(out);
  return out;
}

template <typename T>
OwnerId StagedModel<T>::owner_of(const std::string& parameter_name) const {
  for (OwnerId owner : owners()) {
    for (auto* p : parameters_of(owner)) {
      if (p->name == parameter_name) return owner;
    }
  }
  throw UsageError("unknown parameter '" + parameter_name + "'");
}

template <typename T>
std::set<OwnerId> StagedModel<T>::owners() const {
  std::set<OwnerId> out{kHeadOwner};
  for (int s = 1; s <= num_stages(); ++s) out.insert(s);
  return out;
}

template <typename T>
void StagedModel<T>::reinit_head(std::uint64_t seed) {
  head_->fc.init(derive_seed(seed, "head-reinit"));
}

template <typename T>
StagedModel<T> StagedModel<T>::repartition(int n_stages) const {
  StagedModel copy = *this;
  copy.bounds_ = repartition_bounds(native_bounds(config_), n_stages);
  return copy;
}

template <typename T>
StagedModel<T> StagedModel<T>::clone() const {
  StagedModel copy = build_model<T>(config_, 1);
  copy.bounds_ = bounds_;
  auto src_p = parameters();
  auto dst_p = copy.parameters();
  for (std::size_t i = 0; i < src_p.size(); ++i) {
    std::copy(src_p[i]->value.values().begin(), src_p[i]->value.values().end(), dst_p[i]->value.values().begin());
    dst_p[i]->set_trainable(src_p[i]->trainable);
  }
  auto src_b = buffers();
  auto dst_b = copy.buffers();
  for (std::size_t i = 0; i < src_b.size(); ++i) {
    std::copy(src_b[i]->value.values().begin(), src_b[i]->value.values().end(), dst_b[i]->value.values().begin());
  }
  return copy;
}

template <typename T>
void StagedModel<T>::set_input_normalization(const std::vector<double>& mean, const std::vector<double>& std) {
  static_cast<Stem<T>&>(*(*units_)[0]).set_normalization(mean, std);
}

template class StagedModel<float>;
template class StagedModel<double>;

}  // namespace sskd
