#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "oracle/oracle.hpp"

TEST_CASE("fd_gradient on a quadratic recovers the point") {
  Eigen::MatrixXd p(2, 3);
  p << 0.5, -1.0, 2.0, 0.25, 3.0, -0.75;
  std::vector<double*> elems;
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) elems.push_back(&p(r, c));
  auto f = [&]() { return 0.5 * p.squaredNorm(); };
  auto g = oracle::fd_gradient(f, elems, 1e-5);
  size_t k = 0;
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) REQUIRE(std::abs(g[k++] - p(r, c)) < 1e-8);
}

TEST_CASE("fd_gradient of a constant function is zero") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Ones(3, 3);
  std::vector<double*> elems;
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) elems.push_back(&p(r, c));
  for (double v : oracle::fd_gradient([] { return 1.5; }, elems, 1e-4)) REQUIRE(v == 0.0);
}

TEST_CASE("softmax_kl_oracle closed forms") {
  // identical rows
  std::vector<std::vector<double>> a = {{0.2, -0.7, 1.1}};
  REQUIRE(oracle::softmax_kl_oracle(a, a) == 0.0);

  // already-normalized probabilities: (0.7,0.3) vs (0.6,0.4)
  std::vector<std::vector<double>> p = {{0.7, 0.3}}, q = {{0.6, 0.4}};
  double kl = oracle::softmax_kl_oracle(p, q, /*already_probs=*/true);
  REQUIRE(std::abs(kl - 0.0216) < 1e-4);

  // non-stochastic rows are normalized before comparison
  std::vector<std::vector<double>> scaled = {{7.0, 3.0}}, scaled2 = {{6.0, 4.0}};
  REQUIRE(std::abs(oracle::softmax_kl_oracle(scaled, scaled2, true) - kl) < 1e-12);
}

TEST_CASE("tiny_forward degenerate cases") {
  oracle::TinyConfig cfg;
  cfg.snippets = 1;
  cfg.d_model = 4;
  cfg.num_heads = 2;
  cfg.audio_dim = 2;
  cfg.visual_dim = 3;
  cfg.cosine_head = false;
  cfg.num_classes = 2;

  oracle::Params params;
  auto zeros = [](int r, int c) { return Eigen::MatrixXd::Zero(r, c); };
  auto ones_row = [](int c) { return Eigen::MatrixXd::Ones(1, c); };
  for (const std::string m : {"audio", "visual"}) {
    params[m + ".in.w"] = zeros(m == "audio" ? 2 : 3, 4);
    params[m + ".in.b"] = zeros(1, 4);
    params[m + ".self.ln.g"] = ones_row(4);
    params[m + ".self.ln.b"] = zeros(1, 4);
    params[m + ".cross.lnq.g"] = ones_row(4);
    params[m + ".cross.lnq.b"] = zeros(1, 4);
    params[m + ".cross.lnkv.g"] = ones_row(4);
    params[m + ".cross.lnkv.b"] = zeros(1, 4);
    for (const std::string blk : {".self", ".cross"}) {
      for (int h = 0; h < 2; ++h) {
        std::string hp = m + blk + ".h" + std::to_string(h) + ".";
        params[hp + "wq"] = zeros(4, 2);
        params[hp + "bq"] = zeros(1, 2);
        params[hp + "wk"] = zeros(4, 2);
        params[hp + "bk"] = zeros(1, 2);
        params[hp + "wv"] = zeros(4, 2);
        params[hp + "bv"] = zeros(1, 2);
        params[hp + "wo"] = zeros(2, 4);
      }
      params[m + blk + ".bo"] = zeros(1, 4);
    }
  }
  params["head.w"] = zeros(2, 4);
  Eigen::MatrixXd b(1, 2);
  b << 1.25, -0.5;
  params["head.b"] = b;

  Eigen::MatrixXd audio(1, 2), visual(1, 3);
  audio << 0.3, -0.1;
  visual << 1.0, 0.5, -2.0;
  auto out = oracle::tiny_forward(cfg, params, audio, visual);

  // zero parameters and a linear head: logits are exactly the bias
  REQUIRE(out.logits(0) == 1.25);
  REQUIRE(out.logits(1) == -0.5);

  // K = 1: the video feature is the sum of the two snippet embeddings
  Eigen::RowVectorXd expected = out.audio_snippets.row(0) + out.visual_snippets.row(0);
  REQUIRE((out.video - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("oracle header shares no code with the library") {
  std::ifstream in(HAD_ORACLE_HEADER);
  REQUIRE(in.good());
  std::string line;
  while (std::getline(in, line)) {
    REQUIRE(line.find("had/") == std::string::npos);
    REQUIRE(line.find("namespace had") == std::string::npos);
  }
}
