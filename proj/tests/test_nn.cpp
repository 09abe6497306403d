#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "retfusion/nn.hpp"

using namespace retfusion;
using nn::Matrix;

namespace {

// Central finite difference of a scalar loss w.r.t. one entry.
template <typename Fn>
double fd(Fn loss, double& x, double h = 1e-6) {
  double keep = x;
  x = keep + h;
  double up = loss();
  x = keep - h;
  double down = loss();
  x = keep;
  return (up - down) / (2 * h);
}

}  // namespace

TEST_CASE("linear forward matches hand computation") {
  Rng rng = make_rng(1);
  nn::Linear lin(2, 2, "t", nn::ParamGroup::head, rng);
  lin.weight.value << 1.0, 2.0, 3.0, 4.0;  // (in, out)
  lin.bias.value << 0.5, -0.5;
  Matrix x(1, 2);
  x << 2.0, -1.0;
  Matrix y = lin.forward(x, false, nullptr);
  CHECK(y(0, 0) == doctest::Approx(2 * 1 + (-1) * 3 + 0.5));
  CHECK(y(0, 1) == doctest::Approx(2 * 2 + (-1) * 4 - 0.5));
}

TEST_CASE("linear gradients match finite differences") {
  Rng rng = make_rng(2);
  nn::Linear lin(3, 2, "t", nn::ParamGroup::head, rng);
  Matrix x(4, 3);
  x.setRandom();
  Matrix target(4, 2);
  target.setRandom();
  auto loss = [&] { return 0.5 * (lin.forward(x, false, nullptr) - target).squaredNorm(); };
  lin.weight.zero_grad();
  lin.bias.zero_grad();
  Matrix out = lin.forward(x, false, nullptr);
  Matrix dx = lin.backward(out - target);
  for (int i = 0; i < lin.weight.value.rows(); ++i)
    for (int j = 0; j < lin.weight.value.cols(); ++j)
      CHECK(lin.weight.grad(i, j) == doctest::Approx(fd(loss, lin.weight.value(i, j))).epsilon(1e-5));
  for (int j = 0; j < lin.bias.value.cols(); ++j)
    CHECK(lin.bias.grad(0, j) == doctest::Approx(fd(loss, lin.bias.value(0, j))).epsilon(1e-5));
  // input gradient via finite differences too
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      auto loss_x = [&] { return 0.5 * (lin.forward(x, false, nullptr) - target).squaredNorm(); };
      CHECK(dx(i, j) == doctest::Approx(fd(loss_x, x(i, j))).epsilon(1e-5));
    }
}

TEST_CASE("leaky relu forward and backward") {
  nn::LeakyReLU act(0.1);
  Matrix x(1, 3);
  x << -2.0, 0.0, 3.0;
  Matrix y = act.forward(x, false, nullptr);
  CHECK(y(0, 0) == doctest::Approx(-0.2));
  CHECK(y(0, 1) == 0.0);
  CHECK(y(0, 2) == 3.0);
  Matrix g(1, 3);
  g << 1.0, 1.0, 1.0;
  Matrix dx = act.backward(g);
  CHECK(dx(0, 0) == doctest::Approx(0.1));
  CHECK(dx(0, 2) == doctest::Approx(1.0));
}

TEST_CASE("dropout scales kept units and is identity in eval mode") {
  nn::Dropout drop(0.5);
  Matrix x = Matrix::Ones(1, 1000);
  Matrix eval_out = drop.forward(x, false, nullptr);
  CHECK((eval_out - x).norm() == 0.0);
  Rng rng = make_rng(3);
  Matrix train_out = drop.forward(x, true, &rng);
  int kept = 0;
  for (int j = 0; j < 1000; ++j) {
    if (train_out(0, j) != 0.0) {
      ++kept;
      CHECK(train_out(0, j) == doctest::Approx(2.0));  // inverted scaling 1/(1-p)
    }
  }
  CHECK(kept > 350);
  CHECK(kept < 650);
}

TEST_CASE("conv layer matches direct convolution and finite differences") {
  Rng rng = make_rng(4);
  nn::ConvLayer conv(2, 3, 3, 2, 1, "c", nn::ParamGroup::backbone, rng);
  Image in(2, 5, 5);
  Rng data_rng = make_rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : in.data) v = u(data_rng);

  conv.start_batch();
  Image out = conv.forward(in);
  REQUIRE(out.channels == 3);
  REQUIRE(out.height == 3);
  REQUIRE(out.width == 3);

  // direct convolution oracle
  for (int oc = 0; oc < 3; ++oc)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = conv.bias.value(0, oc);
        int col = 0;
        for (int ic = 0; ic < 2; ++ic)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx, ++col) {
              int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5)
                acc += conv.weight.value(col, oc) * in.at(ic, iy, ix);
            }
        CHECK(out.at(oc, oy, ox) == doctest::Approx(acc).epsilon(1e-10));
      }

  // gradient check: loss = 0.5 * ||out||^2
  auto loss = [&] {
    conv.start_batch();
    Image o = conv.forward(in);
    double s = 0;
    for (double v : o.data) s += v * v;
    return 0.5 * s;
  };
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  conv.start_batch();
  out = conv.forward(in);
  Image din = conv.backward(out, 0);
  for (int i = 0; i < conv.weight.value.rows(); i += 5)
    for (int j = 0; j < conv.weight.value.cols(); ++j)
      CHECK(conv.weight.grad(i, j) == doctest::Approx(fd(loss, conv.weight.value(i, j))).epsilon(1e-4));
  for (size_t k = 0; k < din.data.size(); k += 7) {
    auto loss_in = [&] {
      conv.start_batch();
      Image o = conv.forward(in);
      double s = 0;
      for (double v : o.data) s += v * v;
      return 0.5 * s;
    };
    CHECK(din.data[k] == doctest::Approx(fd(loss_in, in.data[k])).epsilon(1e-4));
  }
}

TEST_CASE("conv encoder embedding is the spatial mean of the last activations") {
  Rng rng = make_rng(6);
  nn::ConvEncoder enc(3, 0.01, rng);
  Image in(3, 16, 16);
  Rng data_rng = make_rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : in.data) v = u(data_rng);
  Matrix embed = enc.forward({in}, false);
  REQUIRE(embed.cols() == enc.embed_dim());
  const Image& act = enc.last_activation(0);
  for (int c = 0; c < act.channels; ++c) {
    double s = 0;
    for (int y = 0; y < act.height; ++y)
      for (int x = 0; x < act.width; ++x) s += act.at(c, y, x);
    CHECK(embed(0, c) == doctest::Approx(s / (act.height * act.width)).epsilon(1e-12));
  }
}

TEST_CASE("conv encoder gradients match finite differences") {
  Rng rng = make_rng(8);
  nn::ConvEncoder enc(3, 0.01, rng);
  Image in(3, 8, 8);
  Rng data_rng = make_rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : in.data) v = u(data_rng);
  Matrix target = Matrix::Zero(1, enc.embed_dim());
  auto loss = [&] { return 0.5 * (enc.forward({in}, true) - target).squaredNorm(); };
  std::vector<nn::Parameter*> params;
  enc.collect(params);
  for (auto* p : params) p->zero_grad();
  Matrix e = enc.forward({in}, true);
  enc.backward(e - target);
  for (auto* p : params) {
    for (int i = 0; i < p->value.rows(); i += std::max<int>(1, p->value.rows() / 4))
      for (int j = 0; j < p->value.cols(); j += std::max<int>(1, p->value.cols() / 4))
        CHECK(p->grad(i, j) == doctest::Approx(fd(loss, p->value(i, j))).epsilon(2e-4));
  }
}

TEST_CASE("adamw decoupled decay shrinks weights even at zero learning rate") {
  Rng rng = make_rng(10);
  nn::Linear lin(2, 2, "t", nn::ParamGroup::head, rng);
  Matrix w0 = lin.weight.value;
  Matrix b0 = lin.bias.value;
  nn::AdamW opt({&lin.weight, &lin.bias}, 0.9, 0.999, 1e-8, 0.1);
  opt.zero_grad();
  lin.weight.grad.setOnes();
  lin.bias.grad.setOnes();
  opt.step(0.0, 0.0);
  CHECK((lin.weight.value - 0.9 * w0).norm() == doctest::Approx(0.0).epsilon(1e-14));
  // biases are excluded from decay
  CHECK((lin.bias.value - b0).norm() == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("adamw step matches the hand-computed update") {
  nn::Parameter p;
  p.name = "w";
  p.decay = false;
  p.value = Matrix::Constant(1, 1, 2.0);
  p.grad = Matrix::Constant(1, 1, 0.5);
  nn::AdamW opt({&p}, 0.9, 0.999, 1e-8, 0.0);
  opt.step(0.0, 0.1);
  // t=1: m_hat = g, v_hat = g^2 -> update = lr * g/(|g|+eps)
  double expect = 2.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  CHECK(p.value(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw respects the two learning-rate groups") {
  nn::Parameter back, head;
  back.group = nn::ParamGroup::backbone;
  head.group = nn::ParamGroup::head;
  for (nn::Parameter* p : {&back, &head}) {
    p->decay = false;
    p->value = Matrix::Constant(1, 1, 1.0);
    p->grad = Matrix::Constant(1, 1, 1.0);
  }
  nn::AdamW opt({&back, &head}, 0.9, 0.999, 1e-8, 0.0);
  opt.step(0.0, 0.5);
  CHECK(back.value(0, 0) == doctest::Approx(1.0));        // backbone lr 0: unchanged
  CHECK(head.value(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("checkpoint save/load round-trips named tensors") {
  Rng rng = make_rng(11);
  nn::Linear a(3, 4, "layer", nn::ParamGroup::head, rng);
  std::stringstream buf;
  nn::save_parameters(buf, {&a.weight, &a.bias});
  nn::Linear b(3, 4, "layer", nn::ParamGroup::head, rng);
  REQUIRE((a.weight.value - b.weight.value).norm() > 0);
  nn::load_parameters(buf, {&b.weight, &b.bias});
  CHECK((a.weight.value - b.weight.value).norm() == 0.0);
  CHECK((a.bias.value - b.bias.value).norm() == 0.0);
}

TEST_CASE("checkpoint load rejects shape mismatches") {
  Rng rng = make_rng(12);
  nn::Linear a(3, 4, "layer", nn::ParamGroup::head, rng);
  std::stringstream buf;
  nn::save_parameters(buf, {&a.weight, &a.bias});
  nn::Linear c(4, 4, "layer", nn::ParamGroup::head, rng);
  CHECK_THROWS(nn::load_parameters(buf, {&c.weight, &c.bias}));
}

TEST_CASE("derived seeds differ per index and are order independent") {
  CHECK(derive_seed(42, 0) != derive_seed(42, 1));
  CHECK(derive_seed(42, 0) != derive_seed(43, 0));
  CHECK(derive_seed(42, 5) == derive_seed(42, 5));
}
