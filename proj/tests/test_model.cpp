#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "edetr/model.hpp"
#include "gradcheck.hpp"

using namespace edetr;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.d_model = 8;
  c.num_classes = 3;
  c.heads = 2;
  c.points = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.head_hidden = 16;
  c.max_queries = 32;
  return c;
}

Tensor random_image(std::uint64_t seed, int hw = 64) {
  std::mt19937_64 rng(seed);
  return Tensor::from({3, hw, hw}, testing::random_vec(rng, 3 * hw * hw, 0.0, 1.0));
}

}  // namespace

TEST_CASE("proposal schedule decays linearly and clamps") {
  ProposalSchedule s{300, 100, 8};
  CHECK(proposals_at(s, 0, 12) == 300);
  CHECK(proposals_at(s, 4, 12) == 200);
  CHECK(proposals_at(s, 8, 12) == 100);
  CHECK(proposals_at(s, 12, 12) == 100);
  ProposalSchedule flat{300, 100, 0};
  CHECK(proposals_at(flat, 0, 12) == 100);
  CHECK_THROWS_AS(proposals_at(s, -1, 12), std::invalid_argument);
  CHECK_THROWS_AS(proposals_at(s, 13, 12), std::invalid_argument);
  ProposalSchedule bad{100, 300, 8};
  CHECK_THROWS_AS(proposals_at(bad, 0, 12), std::invalid_argument);
}

TEST_CASE("64x64 image flattens to 85 encoder tokens") {
  DetrModel m(tiny_cfg(), 1);
  auto mem = m.encode(m.extract_pyramid(random_image(10)));
  CHECK(mem.count() == 64 + 16 + 4 + 1);
  CHECK(mem.level_of.size() == 85);
  CHECK(mem.centers.size() == 85);
  // first token is the top-left cell center of the stride-8 level
  CHECK(mem.centers[0].first == doctest::Approx(0.5 / 8));
  CHECK(mem.centers[0].second == doctest::Approx(0.5 / 8));
  CHECK(mem.level_of[84] == 3);
}

TEST_CASE("zero encoder layers leave the flattened pyramid untouched") {
  auto cfg = tiny_cfg();
  cfg.encoder_layers = 0;
  DetrModel m(cfg, 2);
  auto pyr = m.extract_pyramid(random_image(11));
  auto mem = m.encode(pyr);
  int row = 0;
  for (int l = 0; l < 4; ++l) {
    const Tensor& lv = pyr.levels[l];
    int h = lv.dim(1), w = lv.dim(2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row)
        for (int c = 0; c < cfg.d_model; ++c)
          CHECK(mem.features.at({row, c}) == lv.at({c, y, x}));
  }
}

TEST_CASE("encoder output is finite and deterministic across seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto cfg = tiny_cfg();
    DetrModel m(cfg, seed);
    auto mem = m.encode(m.extract_pyramid(random_image(seed + 500)));
    for (double v : mem.features.data()) REQUIRE(std::isfinite(v));
  }
  DetrModel m(tiny_cfg(), 3);
  Tensor img = random_image(12);
  auto a = m.encode(m.extract_pyramid(img));
  auto b = m.encode(m.extract_pyramid(img));
  CHECK(a.features.data() == b.features.data());
}

TEST_CASE("anchors sit on cell centers with size doubling per level") {
  DetrModel m(tiny_cfg(), 4);
  auto mem = m.encode(m.extract_pyramid(random_image(13)));
  auto a = m.anchors(mem);
  REQUIRE(a.boxes.size() == 85);
  CHECK(a.base_scale == 0.05);
  CHECK(a.boxes[0].w == doctest::Approx(0.05));
  CHECK(a.boxes[64].w == doctest::Approx(0.10));   // level 1
  CHECK(a.boxes[80].w == doctest::Approx(0.20));   // level 2
  CHECK(a.boxes[84].w == doctest::Approx(0.40));   // level 3
  for (size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].cx == mem.centers[i].first);
    CHECK(a.boxes[i].cy == mem.centers[i].second);
  }
}

TEST_CASE("objectness scoring: class-specific max vs agnostic column") {
  Tensor logits = Tensor::from({2, 3}, {0.0, 2.0, -1.0, 3.0, -2.0, 1.0});
  auto spec = objectness(logits, false, Tensor());
  CHECK(spec[0] == doctest::Approx(sigmoid_d(2.0)));
  CHECK(spec[1] == doctest::Approx(sigmoid_d(3.0)));
  Tensor aux = Tensor::from({2, 1}, {-1.0, 0.5});
  auto agn = objectness(logits, true, aux);
  CHECK(agn[0] == doctest::Approx(sigmoid_d(-1.0)));
  CHECK(agn[1] == doctest::Approx(sigmoid_d(0.5)));
  CHECK_THROWS_AS(objectness(logits, true, Tensor()), std::invalid_argument);
}

TEST_CASE("dense init picks the top-k scored tokens with their boxes") {
  auto cfg = tiny_cfg();
  DetrModel m(cfg, 5);
  auto mem = m.encode(m.extract_pyramid(random_image(14)));
  auto dense = m.dense_predict(mem);
  auto scores = objectness(dense.logits, false, Tensor());
  auto cs = m.init_containers(mem, dense, scores, 10);
  REQUIRE(cs.count() == 10);

  // oracle: order of all 85 scores, descending, index ascending on ties
  std::vector<int> idx(85);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  for (int i = 0; i < 10; ++i) {
    CHECK(cs.source_index[i] == idx[i]);
    BoxCXCYWH b = dense.box_at(idx[i]);
    CHECK(cs.refs[i].cx == b.cx);
    CHECK(cs.refs[i].w == b.w);
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(cs.queries.at({i, c}) == mem.features.at({idx[i], c}));
  }
  CHECK_THROWS_AS(m.init_containers(mem, dense, scores, 86),
                  std::invalid_argument);
}

TEST_CASE("grid/center/border initialization places references exactly") {
  auto cfg = tiny_cfg();
  auto mem_of = [&](DetrModel& m) {
    return m.encode(m.extract_pyramid(random_image(15)));
  };
  DetectionSet no_dense;
  std::vector<double> no_scores;

  cfg.init = "grid";
  {
    DetrModel m(cfg, 6);
    auto mem = mem_of(m);
    auto cs = m.init_containers(mem, no_dense, no_scores, 4);
    double want[4][2] = {{0.25, 0.25}, {0.25, 0.75}, {0.75, 0.25}, {0.75, 0.75}};
    REQUIRE(cs.count() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(cs.refs[i].cx == doctest::Approx(want[i][0]));
      CHECK(cs.refs[i].cy == doctest::Approx(want[i][1]));
      CHECK(cs.source_index[i] == -1);
    }
  }
  cfg.init = "center";
  {
    DetrModel m(cfg, 6);
    auto cs = m.init_containers(mem_of(m), no_dense, no_scores, 5);
    for (const auto& r : cs.refs) {
      CHECK(r.cx == 0.5);
      CHECK(r.cy == 0.5);
    }
  }
  cfg.init = "border";
  {
    DetrModel m(cfg, 6);
    auto cs = m.init_containers(mem_of(m), no_dense, no_scores, 4);
    double want[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    for (int i = 0; i < 4; ++i) {
      CHECK(cs.refs[i].cx == doctest::Approx(want[i][0]));
      CHECK(cs.refs[i].cy == doctest::Approx(want[i][1]));
    }
  }
  cfg.init = "learnable";
  {
    DetrModel m(cfg, 6);
    auto cs = m.init_containers(mem_of(m), no_dense, no_scores, 7);
    REQUIRE(cs.count() == 7);
    for (const auto& r : cs.refs) {
      CHECK(r.cx > 0.0);
      CHECK(r.cx < 1.0);
      CHECK(r.w > 0.0);
      CHECK(r.w < 1.0);
    }
  }
  cfg.init = "mystery";
  {
    DetrModel m(cfg, 6);
    auto mem = mem_of(m);
    CHECK_THROWS_AS(m.init_containers(mem, no_dense, no_scores, 4),
                    std::invalid_argument);
  }
}

TEST_CASE("zeroed decoder and head leave reference boxes unchanged") {
  auto cfg = tiny_cfg();
  cfg.init = "grid";
  DetrModel m(cfg, 7);
  for (const auto& [name, t] : m.params().all())
    std::fill(m.params().get(name).mutable_data().begin(),
              m.params().get(name).mutable_data().end(), 0.0);
  auto mem = m.encode(m.extract_pyramid(random_image(16)));
  auto cs = m.init_containers(mem, DetectionSet(), {}, 6);
  auto outs = m.decode(cs, mem, 1);
  REQUIRE(outs.size() == 1);
  for (int i = 0; i < 6; ++i) {
    BoxCXCYWH b = outs[0].box_at(i);
    CHECK(b.cx == doctest::Approx(cs.refs[i].cx).epsilon(1e-9));
    CHECK(b.cy == doctest::Approx(cs.refs[i].cy).epsilon(1e-9));
    CHECK(b.w == doctest::Approx(cs.refs[i].w).epsilon(1e-9));
    CHECK(b.h == doctest::Approx(cs.refs[i].h).epsilon(1e-9));
  }
}

TEST_CASE("two decoder layers chain references through predicted boxes") {
  auto cfg = tiny_cfg();
  cfg.decoder_layers = 2;
  DetrModel m(cfg, 8);
  auto r = m.forward(random_image(17), 6);
  REQUIRE(r.decoder_outputs.size() == 2);
  REQUIRE(r.ref_stages.size() == 3);  // init + one per layer
  for (int i = 0; i < 6; ++i) {
    BoxCXCYWH l1 = r.decoder_outputs[0].box_at(i);
    CHECK(r.ref_stages[1][i].cx == l1.cx);
    CHECK(r.ref_stages[1][i].w == l1.w);
    BoxCXCYWH l2 = r.decoder_outputs[1].box_at(i);
    CHECK(r.ref_stages[2][i].cy == l2.cy);
  }
  // layer boxes stay valid under refinement
  for (const auto& det : r.decoder_outputs)
    for (int i = 0; i < det.count(); ++i) {
      BoxCXCYWH b = det.box_at(i);
      CHECK(b.w > 0.0);
      CHECK(b.cx > 0.0);
      CHECK(b.cx < 1.0);
    }
}

TEST_CASE("decode is permutation-equivariant over containers") {
  auto cfg = tiny_cfg();
  DetrModel m(cfg, 9);
  auto mem = m.encode(m.extract_pyramid(random_image(18)));
  auto dense = m.dense_predict(mem);
  auto scores = objectness(dense.logits, false, Tensor());
  auto cs = m.init_containers(mem, dense, scores, 5);
  auto out = m.decode(cs, mem, 1);

  std::vector<int> perm = {4, 2, 0, 3, 1};
  ContainerSet csp;
  csp.queries = gather_rows(cs.queries, perm);
  for (int i : perm) {
    csp.refs.push_back(cs.refs[i]);
    csp.source_index.push_back(cs.source_index[i]);
  }
  auto outp = m.decode(csp, mem, 1);
  for (int i = 0; i < 5; ++i) {
    for (int c = 0; c < cfg.num_classes; ++c)
      CHECK(outp[0].logits.at({i, c}) ==
            doctest::Approx(out[0].logits.at({perm[i], c})));
    CHECK(outp[0].box_at(i).cx == doctest::Approx(out[0].box_at(perm[i]).cx));
  }
}

TEST_CASE("shared head: dense and decoder heads are one set of weights") {
  auto cfg = tiny_cfg();
  cfg.share_head = true;
  DetrModel shared(cfg, 10);
  CHECK_THROWS_AS(shared.params().get("sparse_head.cls.w"), std::out_of_range);

  Tensor img = random_image(19);
  auto before = shared.forward(img, 5);
  // bump the shared classification bias; both heads must shift
  auto bias = shared.params().get("dense_head.cls.b");
  bias.mutable_data()[0] += 1.0;
  auto after = shared.forward(img, 5);
  CHECK(after.dense.logits.at({0, 0}) ==
        doctest::Approx(before.dense.logits.at({0, 0}) + 1.0));
  bool decoder_shifted = false;
  for (int i = 0; i < 5; ++i)
    if (after.decoder_outputs[0].logits.at({i, 0}) !=
        before.decoder_outputs[0].logits.at({i, 0}))
      decoder_shifted = true;
  CHECK(decoder_shifted);

  cfg.share_head = false;
  DetrModel split(cfg, 10);
  CHECK(split.params().get("sparse_head.cls.w").defined());
}

TEST_CASE("gathered container queries stay differentiable to the encoder") {
  auto cfg = tiny_cfg();
  DetrModel m(cfg, 11);
  auto r = m.forward(random_image(20), 4);
  Tensor loss = sum(r.decoder_outputs[0].logits);
  loss.backward();
  // the encoder FFN weights receive gradient through the gathered queries
  const auto& g = m.params().get("enc0.ffn2.w").grad();
  REQUIRE(!g.empty());
  double mag = 0;
  for (double v : g) mag += std::abs(v);
  CHECK(mag > 0.0);
}

TEST_CASE("checkpoint round trip reproduces the forward pass bitwise") {
  auto cfg = tiny_cfg();
  DetrModel a(cfg, 12);
  DetrModel b(cfg, 999);
  Tensor img = random_image(21);
  auto ra = a.forward(img, 5);

  std::string path = "ckpt_roundtrip.json";
  a.save_checkpoint(path);
  b.load_checkpoint(path);
  auto rb = b.forward(img, 5);
  CHECK(ra.dense.logits.data() == rb.dense.logits.data());
  CHECK(ra.decoder_outputs[0].logits.data() ==
        rb.decoder_outputs[0].logits.data());
  CHECK(ra.decoder_outputs[0].boxes.data() ==
        rb.decoder_outputs[0].boxes.data());
  std::remove(path.c_str());

  DetrModel c(tiny_cfg(), 1);
  CHECK_THROWS_AS(c.load_checkpoint("no_such_file.json"), std::runtime_error);
}

TEST_CASE("class-agnostic forward carries auxiliary objectness") {
  auto cfg = tiny_cfg();
  cfg.class_agnostic = true;
  DetrModel m(cfg, 13);
  auto r = m.forward(random_image(22), 5);
  REQUIRE(r.aux_objectness.defined());
  CHECK(r.aux_objectness.dim(0) == 85);
  for (int i = 0; i < 85; ++i)
    CHECK(r.scores[i] ==
          doctest::Approx(sigmoid_d(r.aux_objectness.at({i, 0}))));
}
