#pragma once

// Randomized finite-difference sweep over every differentiable operator.
// Shared by the unit tests and the acceptance binary.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "sskd/distill.hpp"
#include "sskd/ops.hpp"

namespace sskd::testing {

struct OpGradReport {
  std::string op;
  int cases = 0;
  double max_rel_error = 0.0;
};

namespace detail_suite {

inline int pick(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Runs `cases` randomized checks; make_case fills inputs and returns the loss.
using CaseFactory = std::function<std::function<TensorD(std::vector<TensorD>&)>(std::mt19937_64&, std::vector<TensorD>&)>;

inline OpGradReport run_op(const std::string& name, int cases, std::uint64_t seed, const CaseFactory& make_case) {
  OpGradReport report{name, 0, 0.0};
  std::mt19937_64 rng(seed);
  for (int c = 0; c < cases; ++c) {
    std::vector<TensorD> inputs;
    auto loss = make_case(rng, inputs);
    const auto result = check_gradients(inputs, loss);
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
    ++report.cases;
  }
  return report;
}

}  // namespace detail_suite

inline std::vector<OpGradReport> run_gradient_suite(int cases_per_op = 20, std::uint64_t seed = 20240611) {
  using detail_suite::pick;
  using detail_suite::run_op;
  std::vector<OpGradReport> reports;

  reports.push_back(run_op("conv2d", cases_per_op, seed + 1, [](auto& rng, auto& in) {
    const int n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const int k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    // Choose a spatial extent that keeps the output extent integral.
    int h = k + stride * pick(rng, 0, 3) - 2 * pad;
    while (h < 1) h += stride;
    const bool with_bias = pick(rng, 0, 1) == 1;
    in.push_back(random_tensor({n, cin, h, h + stride}, rng));
    in.push_back(random_tensor({cout, cin, k, k}, rng));
    if (with_bias) in.push_back(random_tensor({cout}, rng));
    const int out_h = (h + 2 * pad - k) / stride + 1, out_w = (h + stride + 2 * pad - k) / stride + 1;
    auto weights = random_tensor({n, cout, out_h, out_w}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>([=](std::vector<TensorD>& t) {
      return weighted_sum(ops::conv2d(t[0], t[1], with_bias ? &t[2] : nullptr, stride, pad), weights);
    });
  }));

  reports.push_back(run_op("linear", cases_per_op, seed + 2, [](auto& rng, auto& in) {
    const int n = pick(rng, 1, 4), fin = pick(rng, 1, 5), fout = pick(rng, 1, 5);
    in.push_back(random_tensor({n, fin}, rng));
    in.push_back(random_tensor({fout, fin}, rng));
    in.push_back(random_tensor({fout}, rng));
    auto weights = random_tensor({n, fout}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::linear(t[0], t[1], &t[2]), weights); });
  }));

  reports.push_back(run_op("relu", cases_per_op, seed + 3, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    in.push_back(random_away_from_zero(s, rng));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::relu(t[0]), weights); });
  }));

  reports.push_back(run_op("max_pool2d", cases_per_op, seed + 4, [](auto& rng, auto& in) {
    const int k = pick(rng, 1, 3), stride = pick(rng, 1, 2), steps = pick(rng, 0, 2);
    const int h = k + stride * steps;
    Shape s{pick(rng, 1, 2), pick(rng, 1, 3), h, h};
    in.push_back(random_distinct(s, rng));
    auto weights = random_tensor({s[0], s[1], steps + 1, steps + 1}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::max_pool2d(t[0], k, stride), weights); });
  }));

  reports.push_back(run_op("avg_pool2d", cases_per_op, seed + 5, [](auto& rng, auto& in) {
    const int k = pick(rng, 1, 3), stride = pick(rng, 1, 2), steps = pick(rng, 0, 2);
    const int h = k + stride * steps;
    Shape s{pick(rng, 1, 2), pick(rng, 1, 3), h, h};
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor({s[0], s[1], steps + 1, steps + 1}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::avg_pool2d(t[0], k, stride), weights); });
  }));

  reports.push_back(run_op("global_avg_pool", cases_per_op, seed + 6, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor({s[0], s[1]}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::global_avg_pool(t[0]), weights); });
  }));

  for (const bool training : {true, false}) {
    reports.push_back(run_op(training ? "batch_norm2d[train]" : "batch_norm2d[eval]", cases_per_op,
                             seed + (training ? 7 : 8), [training](auto& rng, auto& in) {
                               Shape s{pick(rng, 2, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 3)};
                               const int c = s[1];
                               in.push_back(random_tensor(s, rng));
                               in.push_back(random_tensor({c}, rng, 0.5, 1.5));
                               in.push_back(random_tensor({c}, rng));
                               auto running_mean = random_tensor({c}, rng);
                               auto running_var = random_tensor({c}, rng, 0.5, 2.0);
                               auto weights = random_tensor(s, rng);
                               return std::function<TensorD(std::vector<TensorD>&)>([=](std::vector<TensorD>& t) {
                                 TensorD rm = running_mean.clone(), rv = running_var.clone();
                                 ops::BatchNormOptions opt;
                                 opt.training = training;
                                 return weighted_sum(ops::batch_norm2d(t[0], t[1], t[2], rm, rv, opt), weights);
                               });
                             }));
  }

  reports.push_back(run_op("add", cases_per_op, seed + 9, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
    in.push_back(random_tensor(s, rng));
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::add(t[0], t[1]), weights); });
  }));

  reports.push_back(run_op("mul", cases_per_op, seed + 10, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
    in.push_back(random_tensor(s, rng));
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::mul(t[0], t[1]), weights); });
  }));

  reports.push_back(run_op("scale", cases_per_op, seed + 11, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
    const double factor = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::scale(t[0], factor), weights); });
  }));

  reports.push_back(run_op("softmax", cases_per_op, seed + 12, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 2, 6)};
    const double temperature = std::uniform_real_distribution<double>(0.5, 8.0)(rng);
    in.push_back(random_tensor(s, rng, -3.0, 3.0));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::softmax(t[0], temperature), weights); });
  }));

  reports.push_back(run_op("log_softmax", cases_per_op, seed + 13, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 2, 6)};
    const double temperature = std::uniform_real_distribution<double>(0.5, 8.0)(rng);
    in.push_back(random_tensor(s, rng, -3.0, 3.0));
    auto weights = random_tensor(s, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::log_softmax(t[0], temperature), weights); });
  }));

  reports.push_back(run_op("softmax_cross_entropy", cases_per_op, seed + 14, [](auto& rng, auto& in) {
    const int n = pick(rng, 1, 4), c = pick(rng, 2, 6);
    std::vector<int> labels(n);
    for (auto& l : labels) l = pick(rng, 0, c - 1);
    in.push_back(random_tensor({n, c}, rng, -3.0, 3.0));
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return ops::softmax_cross_entropy(t[0], std::span<const int>(labels)); });
  }));

  reports.push_back(run_op("l2_distance", cases_per_op, seed + 15, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
    in.push_back(random_tensor(s, rng));
    in.push_back(random_tensor(s, rng));
    return std::function<TensorD(std::vector<TensorD>&)>(
        [](std::vector<TensorD>& t) { return ops::l2_distance(t[0], t[1]); });
  }));

  reports.push_back(run_op("resize_bilinear", cases_per_op, seed + 16, [](auto& rng, auto& in) {
    Shape s{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4)};
    const int oh = pick(rng, 1, 6), ow = pick(rng, 1, 6);
    in.push_back(random_tensor(s, rng));
    auto weights = random_tensor({s[0], s[1], oh, ow}, rng);
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return weighted_sum(ops::resize_bilinear(t[0], oh, ow), weights); });
  }));

  reports.push_back(run_op("kd_loss", cases_per_op, seed + 17, [](auto& rng, auto& in) {
    const int n = pick(rng, 1, 4), c = pick(rng, 2, 6);
    KDSpec spec;
    spec.temperature = std::uniform_real_distribution<double>(0.5, 8.0)(rng);
    spec.t2_rescale = pick(rng, 0, 1) == 1;
    auto teacher = random_tensor({n, c}, rng, -3.0, 3.0);
    in.push_back(random_tensor({n, c}, rng, -3.0, 3.0));
    return std::function<TensorD(std::vector<TensorD>&)>(
        [=](std::vector<TensorD>& t) { return kd_loss(teacher, t[0], spec); });
  }));

  return reports;
}

}  // namespace sskd::testing
