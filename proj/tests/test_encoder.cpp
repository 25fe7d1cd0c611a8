#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "qsum/encoder.hpp"

using namespace qsum;

using T = Tensor<double>;

namespace {

// brute force over all (V+1)^T alignment paths: collapse repeats, drop
// blanks, and sum the probability of every path that reproduces the labels
double ctc_oracle(const T& logits, const std::vector<int>& labels) {
    const int64_t t_len = logits.rows();
    const int width = static_cast<int>(logits.cols());
    const int blank = width - 1;
    // row-wise softmax
    std::vector<double> p(static_cast<size_t>(logits.size()));
    for (int64_t t = 0; t < t_len; ++t) {
        double m = -1e300, z = 0;
        for (int k = 0; k < width; ++k) m = std::max(m, double(logits.at(t, k)));
        for (int k = 0; k < width; ++k) z += std::exp(double(logits.at(t, k)) - m);
        for (int k = 0; k < width; ++k)
            p[static_cast<size_t>(t * width + k)] = std::exp(double(logits.at(t, k)) - m) / z;
    }
    double total = 0.0;
    std::vector<int> path(static_cast<size_t>(t_len), 0);
    while (true) {
        std::vector<int> collapsed;
        int prev = -1;
        double prob = 1.0;
        for (int64_t t = 0; t < t_len; ++t) {
            const int s = path[static_cast<size_t>(t)];
            prob *= p[static_cast<size_t>(t * width + s)];
            if (s != blank && s != prev) collapsed.push_back(s);
            prev = s;
        }
        if (collapsed == labels) total += prob;
        // odometer increment
        int64_t i = 0;
        for (; i < t_len; ++i) {
            if (++path[static_cast<size_t>(i)] < width) break;
            path[static_cast<size_t>(i)] = 0;
        }
        if (i == t_len) break;
    }
    return -std::log(total);
}

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.d_x = 32;
    cfg.heads = 4;
    cfg.ffn = 48;
    cfg.max_frames = 64;
    cfg.vocab = 8;
    cfg.frame_dim = 6;
    cfg.bos = 6;
    cfg.eos = 7;
    return cfg;
}

}  // namespace

TEST_CASE("ctc_loss equals path enumeration for every small configuration") {
    Rng rng(99);
    for (int vocab = 1; vocab <= 3; ++vocab) {
        for (int t_len = 1; t_len <= 5; ++t_len) {
            for (int u = 0; u <= 3; ++u) {
                // random target over the vocab, skipped when infeasible
                for (int trial = 0; trial < 3; ++trial) {
                    std::vector<int> labels;
                    for (int i = 0; i < u; ++i)
                        labels.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
                    T logits = T::randn({t_len, vocab + 1}, rng, 1.5);
                    if (t_len < ctc_min_frames(labels)) {
                        CHECK_THROWS(ctc_loss(logits, labels));
                        continue;
                    }
                    const double got = ctc_loss(logits, labels).item();
                    const double want = ctc_oracle(logits, labels);
                    CHECK(got == doctest::Approx(want).epsilon(1e-8));
                }
            }
        }
    }
}

TEST_CASE("ctc_loss closed forms: single frame and all-blank target") {
    // uniform over 3 labels + blank, one frame, one label
    T logits = T::zeros({1, 4});
    CHECK(ctc_loss(logits, {1}).item() == doctest::Approx(-std::log(0.25)).epsilon(1e-12));

    // U=0 means the all-blank path, so the loss is -sum log p(blank)
    Rng rng(3);
    T lg = T::randn({4, 4}, rng, 1.0);
    double want = 0.0;
    for (int64_t t = 0; t < 4; ++t) {
        double m = -1e300, z = 0;
        for (int k = 0; k < 4; ++k) m = std::max(m, double(lg.at(t, k)));
        for (int k = 0; k < 4; ++k) z += std::exp(double(lg.at(t, k)) - m);
        want -= double(lg.at(t, 3)) - m - std::log(z);
    }
    CHECK(ctc_loss(lg, {}).item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("ctc_loss with two frames and one label matches the three-path sum") {
    Rng rng(5);
    T lg = T::randn({2, 3}, rng, 1.0);  // 2 labels + blank
    auto p = [&](int64_t t, int k) {
        double m = -1e300, z = 0;
        for (int j = 0; j < 3; ++j) m = std::max(m, double(lg.at(t, j)));
        for (int j = 0; j < 3; ++j) z += std::exp(double(lg.at(t, j)) - m);
        return std::exp(double(lg.at(t, k)) - m) / z;
    };
    const int a = 0, blank = 2;
    const double want = p(0, a) * p(1, a) + p(0, a) * p(1, blank) + p(0, blank) * p(1, a);
    CHECK(ctc_loss(lg, {a}).item() == doctest::Approx(-std::log(want)).epsilon(1e-10));
}

TEST_CASE("ctc_loss rejects bad inputs explicitly") {
    T lg = T::zeros({2, 4});
    CHECK_THROWS_WITH(ctc_loss(lg, {0, 1, 2}), doctest::Contains("infeasible"));
    CHECK_THROWS_WITH(ctc_loss(lg, {0, 0}), doctest::Contains("infeasible"));  // repeat needs 3
    CHECK_THROWS(ctc_loss(lg, {3}));   // label collides with blank
    CHECK_THROWS(ctc_loss(lg, {-1}));
}

TEST_CASE("ctc greedy decode collapses repeats and strips blanks") {
    // argmax sequence: a a blank a b b -> a a b
    T lg = T::zeros({6, 3});
    auto set = [&](int64_t t, int k) { lg.data()[t * 3 + k] = 5.0; };
    set(0, 0);
    set(1, 0);
    set(2, 2);
    set(3, 0);
    set(4, 1);
    set(5, 1);
    CHECK(ctc_greedy_decode(lg) == std::vector<int>{0, 0, 1});
}

TEST_CASE("encode returns L+1 states of the input length") {
    ParamStore<double> ps;
    Rng rng(7);
    auto cfg = tiny_cfg();
    Encoder<double> enc(cfg, ps, rng);
    for (int64_t n : {1, 7, 33}) {
        T frames = T::randn({n, cfg.frame_dim}, rng, 1.0);
        auto states = enc.encode(frames);
        CHECK(static_cast<int>(states.size()) == cfg.layers + 1);
        for (const auto& s : states) {
            CHECK(s.rows() == n);
            CHECK(s.cols() == cfg.d_x);
            for (int64_t i = 0; i < s.size(); ++i) CHECK(std::isfinite(s.data()[i]));
        }
    }
}

TEST_CASE("encode is deterministic and position-sensitive") {
    ParamStore<double> ps;
    Rng rng(7);
    auto cfg = tiny_cfg();
    Encoder<double> enc(cfg, ps, rng);
    T frames = T::randn({8, cfg.frame_dim}, rng, 1.0);
    auto a = enc.encode(frames);
    auto b = enc.encode(frames);
    for (size_t l = 0; l < a.size(); ++l)
        for (int64_t i = 0; i < a[l].size(); ++i) CHECK(a[l].data()[i] == b[l].data()[i]);

    // swap two frames; outputs must move (position embeddings are active)
    T swapped = T::from(frames.shape(), frames.values());
    for (int64_t j = 0; j < cfg.frame_dim; ++j)
        std::swap(swapped.data()[0 * cfg.frame_dim + j], swapped.data()[5 * cfg.frame_dim + j]);
    auto c = enc.encode(swapped);
    double diff = 0;
    for (int64_t i = 0; i < a.back().size(); ++i)
        diff = std::max(diff, std::abs(a.back().data()[i] - c.back().data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("encode rejects empty, oversized and misshapen inputs") {
    ParamStore<double> ps;
    Rng rng(7);
    auto cfg = tiny_cfg();
    Encoder<double> enc(cfg, ps, rng);
    CHECK_THROWS(enc.encode(T::zeros({0, cfg.frame_dim})));
    CHECK_THROWS(enc.encode(T::zeros({cfg.max_frames + 1, cfg.frame_dim})));
    CHECK_THROWS(enc.encode(T::zeros({4, cfg.frame_dim + 1})));
}

TEST_CASE("encoder config invariants are enforced") {
    auto bad = tiny_cfg();
    bad.layers = 1;
    CHECK_THROWS(bad.validate());
    bad = tiny_cfg();
    bad.d_x = 30;  // not divisible by 4 heads
    CHECK_THROWS(bad.validate());
}

TEST_CASE("hybrid_loss blends with the fixed weight") {
    T ctc = T::scalar(2.0);
    T att = T::scalar(1.0);
    CHECK(hybrid_loss(ctc, att, 0.0).item() == doctest::Approx(1.0));
    CHECK(hybrid_loss(ctc, att, 1.0).item() == doctest::Approx(2.0));
    CHECK(hybrid_loss(ctc, att, 0.3).item() == doctest::Approx(1.3));
    CHECK_THROWS(hybrid_loss(ctc, att, 1.5));
    CHECK_THROWS(hybrid_loss(ctc, att, -0.1));
}

TEST_CASE("pretrain model trains toward its transcript on a fixed sample") {
    ParamStore<double> ps;
    Rng rng(11);
    auto cfg = tiny_cfg();
    PretrainModel<double> model(cfg, ps, rng);

    Adam<double> opt;
    for (auto& [name, t] : ps.items()) opt.add_param(name, t);

    std::vector<int> transcript{1, 3, 0, 2, 4};
    T frames = T::randn({20, cfg.frame_dim}, rng, 1.0);
    const double first = model.loss(frames, transcript, 0.3).item();
    double last = first;
    for (int step = 0; step < 40; ++step) {
        opt.zero_grad();
        T loss = model.loss(frames, transcript, 0.3);
        loss.backward();
        opt.step(3e-3);
        last = loss.item();
    }
    CHECK(last < first);
    CHECK(std::isfinite(last));

    auto decoded = model.decode_ctc(frames);
    for (int id : decoded) {
        CHECK(id >= 0);
        CHECK(id < cfg.vocab);
    }
}
