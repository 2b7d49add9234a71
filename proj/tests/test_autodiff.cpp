#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "noisemap/checkpoint.hpp"
#include "noisemap/ops.hpp"
#include "noisemap/optim.hpp"
#include "support.hpp"

using namespace noisemap;
using noisemap::testutil::gradient_error;
using noisemap::testutil::Input;
using noisemap::testutil::project;
using noisemap::testutil::random_input;

namespace {

template <class V>
using scalar_t = std::decay_t<decltype(std::declval<V&>()[0].values()[0])>;

constexpr double kTol64 = 1e-6;
constexpr double kTol32 = 1e-3;

// Runs the same check at both precisions.
template <class F>
void check_both(F f, const std::vector<Input>& inputs, const char* what) {
  EXPECT_LT(gradient_error<double>(f, inputs), kTol64) << what << " (64-bit)";
  EXPECT_LT(gradient_error<float>(f, inputs), kTol32) << what << " (32-bit)";
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no noisemap::Error thrown";
  return ErrorKind::Argument;
}

}  // namespace

TEST(Tensor, ConstructionChecksLength) {
  EXPECT_THROW(ad::Tensor<float>({2, 3}, std::vector<float>(5)), Error);
  const ad::Tensor<float> t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Relu, GradientAtKinkSides) {
  ad::Tensor<double> x({2}, {-1.0, 2.0}, true);
  ad::backward(ad::sum(ad::scale(ad::relu(x), 3.0)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 3.0);
}

TEST(Det2x2, ValueAndGradient) {
  ad::Tensor<double> m({2, 2}, {1.5, -2.0, 0.25, 3.0}, true);
  const auto d = ad::det2x2(m);
  EXPECT_DOUBLE_EQ(d.item(), 1.5 * 3.0 - (-2.0) * 0.25);
  ad::backward(d);
  EXPECT_DOUBLE_EQ(m.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(m.grad()[1], -0.25);
  EXPECT_DOUBLE_EQ(m.grad()[2], 2.0);
  EXPECT_DOUBLE_EQ(m.grad()[3], 1.5);
  check_both([](auto& xs) { return ad::det2x2(xs[0]); }, {random_input({2, 2}, 3)}, "det2x2");
}

TEST(Conv2d, OnesKernelCentreIsNine) {
  const ad::Tensor<float> x({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  const ad::Tensor<float> w({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  const auto y = ad::conv2d(x, w);
  ASSERT_EQ(y.shape(), (ad::Shape{1, 1, 3, 3}));
  EXPECT_EQ(y.values()[4], 9.0f);
  EXPECT_EQ(y.values()[0], 4.0f);
  EXPECT_EQ(y.values()[1], 6.0f);
}

TEST(Mean, GradientIsOneOverN) {
  ad::Tensor<double> x({7}, std::vector<double>(7, 2.0), true);
  ad::backward(ad::mean(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 7.0);
}

TEST(Backward, TwiceWithoutZeroingDoubles) {
  ad::Tensor<double> x({3}, {0.5, -1.0, 2.0}, true);
  const auto loss = ad::sum(ad::mul(x, x));
  ad::backward(loss);
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  ad::backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * once[i]);
}

TEST(Backward, NonScalarRootIsArgumentError) {
  ad::Tensor<double> x({3}, {1, 2, 3}, true);
  EXPECT_EQ(kind_of([&] { ad::backward(ad::relu(x)); }), ErrorKind::Argument);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  ad::Tensor<double> x({1}, {3.0}, true);
  const auto y = ad::mul(x, x);
  ad::backward(ad::sum(ad::add(y, y)));  // 2x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Shapes, MismatchesAreShapeErrors) {
  const ad::Tensor<float> a({2, 2}, std::vector<float>(4)), b({4}, std::vector<float>(4));
  EXPECT_EQ(kind_of([&] { ad::add(a, b); }), ErrorKind::Shape);
  EXPECT_EQ(kind_of([&] { ad::matmul(a, ad::Tensor<float>({3, 1}, std::vector<float>(3))); }), ErrorKind::Shape);
  EXPECT_EQ(kind_of([&] { ad::maxpool2d(ad::Tensor<float>({1, 1, 3, 4}, std::vector<float>(12))); }), ErrorKind::Shape);
  EXPECT_EQ(kind_of([&] { ad::det2x2(b); }), ErrorKind::Shape);
}

TEST(Softmax, RowsArePositiveAndSumToOne) {
  const auto in = random_input({2, 3, 4, 5}, 8);
  const ad::Tensor<float> x(in.shape, std::vector<float>(in.values.begin(), in.values.end()));
  const auto probs = ad::softmax(ad::scale(x, 20.0f));
  const auto p = probs.values();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t q = 0; q < 20; ++q) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = p[(n * 3 + c) * 20 + q];
        EXPECT_GT(v, 0.0f);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(BatchNorm, EvalModeIsFrozenAffineMap) {
  ad::BatchNormState<double> st(2);
  st.running_mean = {0.5, -1.0};
  st.running_var = {4.0, 0.25};
  const ad::Tensor<double> g({2}, {2.0, 1.0}), b({2}, {0.0, 3.0});
  const ad::Tensor<double> x({1, 2, 1, 2}, {1.0, 2.0, 0.0, -1.0});
  const auto out = ad::batchnorm2d(x, g, b, st, ad::Mode::Eval);
  const auto y = out.values();
  EXPECT_NEAR(y[0], 2.0 * (1.0 - 0.5) / std::sqrt(4.0 + 1e-5), 1e-12);
  EXPECT_NEAR(y[3], (-1.0 + 1.0) / std::sqrt(0.25 + 1e-5) + 3.0, 1e-12);
  EXPECT_EQ(st.running_mean[0], 0.5);
  const auto out2 = ad::batchnorm2d(x, g, b, st, ad::Mode::Eval);
  const auto again = out2.values();
  EXPECT_TRUE(std::equal(y.begin(), y.end(), again.begin()));
}

TEST(BatchNorm, TrainModeUpdatesRunningStatistics) {
  ad::BatchNormState<double> st(1);
  const ad::Tensor<double> g({1}, {1.0}), b({1}, {0.0});
  const ad::Tensor<double> x({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  const auto out = ad::batchnorm2d(x, g, b, st, ad::Mode::Train);
  const auto y = out.values();
  EXPECT_NEAR(y[0], -1.5 / std::sqrt(1.25 + 1e-5), 1e-12);
  EXPECT_NEAR(st.running_mean[0], 0.25, 1e-12);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per primitive
// ---------------------------------------------------------------------------

TEST(GradCheck, Elementwise) {
  const std::vector<Input> two = {random_input({3, 4}, 1), random_input({3, 4}, 2)};
  check_both([](auto& xs) { return project(ad::add(xs[0], xs[1])); }, two, "add");
  check_both([](auto& xs) { return project(ad::sub(xs[0], xs[1])); }, two, "sub");
  check_both([](auto& xs) { return project(ad::mul(xs[0], xs[1])); }, two, "mul");
  check_both([](auto& xs) { return project(ad::relu(xs[0])); }, {random_input({3, 4}, 3, 0.05)}, "relu");
  check_both([](auto& xs) { return project(ad::abs(xs[0])); }, {random_input({3, 4}, 4, 0.05)}, "abs");
  check_both(
      [](auto& xs) {
        using T = scalar_t<decltype(xs)>;
        return project(ad::log(ad::add_scalar(ad::abs(xs[0]), T(0.5))));
      },
      {random_input({3, 4}, 5, 0.05)}, "log");
  check_both(
      [](auto& xs) {
        using T = scalar_t<decltype(xs)>;
        return project(ad::clamp(xs[0], T(-0.5), T(0.7)));
      },
      {random_input({3, 4}, 6, 0.05)}, "clamp");
  check_both(
      [](auto& xs) {
        using T = scalar_t<decltype(xs)>;
        return project(ad::scale(xs[0], T(-2.5)));
      },
      {random_input({5}, 7)}, "scale");
}

TEST(GradCheck, Reductions) {
  check_both([](auto& xs) { return ad::mean(ad::mul(xs[0], xs[0])); }, {random_input({2, 3, 4}, 8)}, "mean");
  check_both([](auto& xs) { return ad::sum(ad::mul(xs[0], xs[0])); }, {random_input({6}, 9)}, "sum");
}

TEST(GradCheck, Shaping) {
  check_both([](auto& xs) { return project(ad::slice(xs[0], 1, 1, 3)); }, {random_input({2, 4, 3}, 10)}, "slice");
  check_both([](auto& xs) { return project(ad::transpose(xs[0])); }, {random_input({3, 5}, 11)}, "transpose");
  check_both([](auto& xs) { return project(ad::reshape(xs[0], {6, 2})); }, {random_input({3, 4}, 12)}, "reshape");
  check_both([](auto& xs) { return project(ad::flatten_pixels(xs[0])); }, {random_input({2, 3, 2, 2}, 13)},
             "flatten_pixels");
  check_both([](auto& xs) { return project(ad::concat(xs[0], xs[1])); },
             {random_input({2, 1, 2, 2}, 14), random_input({2, 3, 2, 2}, 15)}, "concat");
}

TEST(GradCheck, Matmul) {
  check_both([](auto& xs) { return project(ad::matmul(xs[0], xs[1])); },
             {random_input({3, 4}, 16), random_input({4, 2}, 17)}, "matmul");
}

TEST(GradCheck, Conv2d) {
  check_both([](auto& xs) { return project(ad::conv2d(xs[0], xs[1], xs[2])); },
             {random_input({2, 3, 5, 4}, 18), random_input({2, 3, 3, 3}, 19), random_input({2}, 20)}, "conv2d");
  check_both([](auto& xs) { return project(ad::conv2d(xs[0], xs[1])); },
             {random_input({1, 2, 4, 4}, 21), random_input({3, 2, 1, 1}, 22)}, "conv2d 1x1");
}

TEST(GradCheck, PoolAndUpsample) {
  check_both([](auto& xs) { return project(ad::maxpool2d(xs[0])); }, {random_input({2, 2, 4, 6}, 23)}, "maxpool2d");
  check_both([](auto& xs) { return project(ad::upsample_nearest(xs[0])); }, {random_input({1, 2, 3, 2}, 24)},
             "upsample_nearest");
}

TEST(GradCheck, Softmax) {
  check_both([](auto& xs) { return project(ad::softmax(xs[0])); }, {random_input({2, 3, 2, 2}, 25)}, "softmax 4d");
  check_both([](auto& xs) { return project(ad::softmax(xs[0])); }, {random_input({4, 2}, 26)}, "softmax 2d");
}

TEST(GradCheck, BatchNorm) {
  auto train = [](auto& xs) {
    using T = scalar_t<decltype(xs)>;
    ad::BatchNormState<T> st(3);
    return project(ad::batchnorm2d(xs[0], xs[1], xs[2], st, ad::Mode::Train));
  };
  check_both(train, {random_input({2, 3, 3, 2}, 27), random_input({3}, 28), random_input({3}, 29)}, "bn train");
  auto eval = [](auto& xs) {
    using T = scalar_t<decltype(xs)>;
    ad::BatchNormState<T> st(3);
    st.running_mean = {T(0.1), T(-0.3), T(0.7)};
    st.running_var = {T(1.5), T(0.4), T(2.0)};
    return project(ad::batchnorm2d(xs[0], xs[1], xs[2], st, ad::Mode::Eval));
  };
  check_both(eval, {random_input({2, 3, 2, 2}, 30), random_input({3}, 31), random_input({3}, 32)}, "bn eval");
}

TEST(GradCheck, CompositeGraph) {
  auto f = [](auto& xs) {
    const auto h = ad::relu(ad::conv2d(xs[0], xs[1]));
    const auto p = ad::softmax(ad::conv2d(ad::upsample_nearest(ad::maxpool2d(h)), xs[2]));
    return ad::mean(ad::mul(p, p));
  };
  check_both(f, {random_input({1, 2, 4, 4}, 33), random_input({3, 2, 3, 3}, 34), random_input({2, 3, 1, 1}, 35)},
             "composite");
}

// ---------------------------------------------------------------------------
// Optimizer and checkpoint
// ---------------------------------------------------------------------------

namespace {

ad::Parameter<double> param_with_grad(double value, double grad) {
  ad::Parameter<double> p("p", ad::Tensor<double>({1}, {value}, true));
  p.tensor.mutable_grad()[0] = grad;
  return p;
}

}  // namespace

TEST(Sgd, PlainStep) {
  auto p = param_with_grad(1.0, 0.5);
  ad::Parameter<double>* ps[] = {&p};
  ad::sgd_step<double>(ps, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.tensor.values()[0], 1.0 - 0.1 * 0.5);
}

TEST(Sgd, TwoMomentumSteps) {
  auto p = param_with_grad(0.0, 2.0);
  ad::Parameter<double>* ps[] = {&p};
  ad::sgd_step<double>(ps, 0.01, 0.9);
  ad::sgd_step<double>(ps, 0.01, 0.9);
  EXPECT_NEAR(p.tensor.values()[0], -0.01 * 2.0 * 2.9, 1e-15);
  EXPECT_NEAR(p.velocity[0], 1.9 * 2.0, 1e-15);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  auto p = param_with_grad(4.0, 0.0);
  ad::Parameter<double> untouched("q", ad::Tensor<double>({2}, {1.0, 2.0}, true));
  ad::Parameter<double>* ps[] = {&p, &untouched};
  ad::sgd_step<double>(ps, 0.1, 0.9);
  EXPECT_EQ(p.tensor.values()[0], 4.0);
  EXPECT_EQ(untouched.tensor.values()[1], 2.0);
  ad::zero_grad<double>(ps);
  EXPECT_EQ(p.tensor.grad()[0], 0.0);
}

TEST(Checkpoint, RoundTrip) {
  const std::vector<ad::TensorRecord> recs = {{"a.weight", {2, 1, 3, 3}, std::vector<float>(18, 0.5f)},
                                              {"scalar", {}, {3.25f}},
                                              {"b", {3}, {1.0f, -2.0f, 1e-30f}}};
  const std::string bytes = ad::encode_checkpoint(recs);
  EXPECT_EQ(bytes.substr(0, 4), "NNW1");
  const auto back = ad::decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, recs[i].name);
    EXPECT_EQ(back[i].shape, recs[i].shape);
    EXPECT_EQ(back[i].values, recs[i].values);
  }
  EXPECT_EQ(ad::encode_checkpoint(back), bytes);
}

TEST(Checkpoint, BadMagicAndTruncation) {
  std::string bytes = ad::encode_checkpoint({{"w", {4}, {1, 2, 3, 4}}});
  EXPECT_EQ(kind_of([&] { ad::decode_checkpoint(bytes.substr(0, bytes.size() - 2)); }), ErrorKind::Corruption);
  bytes[3] = '2';
  EXPECT_EQ(kind_of([&] { ad::decode_checkpoint(bytes); }), ErrorKind::Format);
}
