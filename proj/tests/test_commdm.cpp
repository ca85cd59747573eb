#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "compose/commdm.hpp"

using namespace compose;

namespace {

DenoiserConfig tiny_prior() {
    DenoiserConfig cfg;
    cfg.latent = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ff = 16;
    cfg.channels = 36;
    cfg.max_frames = 64;
    cfg.classes = 6;
    return cfg;
}

CommConfig tiny_comm() {
    CommConfig cfg;
    cfg.tap = 1;
    cfg.comm_layers = 1;
    cfg.latent = 8;
    cfg.heads = 2;
    return cfg;
}

}  // namespace

TEST_CASE("freshly initialized comm block is an exact no-op") {
    CommParams c = init_comm(tiny_comm(), 7);
    CHECK(c.out_w.isZero(0));
    CHECK(c.out_b.isZero(0));
    CHECK(c.d_out_w.isZero(0));
    CHECK(c.d_out_b.isZero(0));

    Mat oa(5, 8), ob(5, 8), d(1, 3);
    NoiseStream{1, 80, 0}.fill_normal(0, oa);
    NoiseStream{1, 80, 1}.fill_normal(0, ob);
    NoiseStream{1, 80, 2}.fill_normal(0, d);
    CommOutput f = comm_forward(c, oa, ob, d, 3);
    CHECK(f.delta_o.rows() == 5);
    CHECK(f.delta_o.cols() == 8);
    CHECK(f.delta_o.isZero(0));
    CHECK(f.d_hat.rows() == 1);
    CHECK(f.d_hat.cols() == 3);
    CHECK(f.d_hat.isZero(0));

    CHECK_THROWS_AS(comm_forward(c, oa, ob.topRows(3), d, 3), ValidationError);
    CHECK_THROWS_AS(comm_forward(c, oa, ob, Mat::Zero(2, 3), 3), ValidationError);
}

TEST_CASE("directed calls with swapped roles disagree once trained weights exist") {
    CommParams c = init_comm(tiny_comm(), 7);
    NoiseStream{2, 81, 0}.fill_normal(0, c.out_w);
    NoiseStream{2, 81, 1}.fill_normal(0, c.d_out_w);
    Mat oa(4, 8), ob(4, 8), da(1, 3), db(1, 3);
    NoiseStream{2, 82, 0}.fill_normal(0, oa);
    NoiseStream{2, 82, 1}.fill_normal(0, ob);
    NoiseStream{2, 82, 2}.fill_normal(0, da);
    NoiseStream{2, 82, 3}.fill_normal(0, db);
    CommOutput fa = comm_forward(c, oa, ob, da, 5);
    CommOutput fb = comm_forward(c, ob, oa, db, 5);
    CHECK((fa.delta_o - fb.delta_o).norm() > 1e-6);
    CHECK((fa.d_hat - fb.d_hat).norm() > 1e-9);
}

TEST_CASE("comm_backward matches finite differences") {
    CommConfig cc = tiny_comm();
    CommParams c = init_comm(cc, 11);
    // give the zero-initialized heads weight so gradients reach the stack
    NoiseStream{3, 83, 0}.fill_normal(0, c.out_w);
    c.out_w *= 0.3;
    NoiseStream{3, 83, 1}.fill_normal(0, c.out_b);
    NoiseStream{3, 83, 2}.fill_normal(0, c.d_out_w);
    NoiseStream{3, 83, 3}.fill_normal(0, c.d_out_b);

    const int n = 3;
    Mat oa(n, 8), ob(n, 8), d(1, 3);
    NoiseStream{3, 84, 0}.fill_normal(0, oa);
    NoiseStream{3, 84, 1}.fill_normal(0, ob);
    NoiseStream{3, 84, 2}.fill_normal(0, d);
    Mat w_delta(n, 8), w_d(1, 3);
    NoiseStream{3, 84, 3}.fill_normal(0, w_delta);
    NoiseStream{3, 84, 4}.fill_normal(0, w_d);

    auto loss = [&](const CommParams& params) {
        CommOutput f = comm_forward(params, oa, ob, d, 4);
        return (f.delta_o.array() * w_delta.array()).sum() +
               (f.d_hat.array() * w_d.array()).sum();
    };

    CommTape tape;
    comm_forward(c, oa, ob, d, 4, &tape);
    CommParams grads = comm_zeros_like(c);
    comm_backward(c, tape, w_delta, w_d, grads);

    const Scalar h = 1e-5;
    std::vector<std::pair<std::string, Mat*>> tensors;
    c.for_each([&](const std::string& nm, Mat& m) { tensors.push_back({nm, &m}); });
    std::vector<Mat*> gs;
    grads.for_each([&](const std::string&, Mat& g) { gs.push_back(&g); });
    for (size_t i = 0; i < tensors.size(); ++i) {
        Mat& w = *tensors[i].second;
        const Mat& g = *gs[i];
        Scalar num_sq = 0, diff_sq = 0;
        for (int r = 0; r < w.rows(); ++r)
            for (int col = 0; col < w.cols(); ++col) {
                Scalar keep = w(r, col);
                w(r, col) = keep + h;
                Scalar up = loss(c);
                w(r, col) = keep - h;
                Scalar dn = loss(c);
                w(r, col) = keep;
                Scalar num = (up - dn) / (2 * h);
                num_sq += num * num;
                Scalar dd = num - g(r, col);
                diff_sq += dd * dd;
            }
        INFO("tensor ", tensors[i].first);
        if (std::sqrt(num_sq) < 1e-6)
            CHECK(g.norm() < 1e-6);
        else
            CHECK(std::sqrt(diff_sq) / std::sqrt(num_sq) < 1e-4);
    }
}

TEST_CASE("zero-comm joint denoising factorizes into the two priors") {
    DenoiserParams pa = init_params(tiny_prior(), 4);
    DenoiserParams pb = init_params(tiny_prior(), 5);
    CommParams c = init_comm(tiny_comm(), 7);
    NoiseSchedule s = make_schedule(10);

    TwoActorState st;
    st.x_a.resize(6, 36);
    st.x_b.resize(6, 36);
    NoiseStream{4, 85, 0}.fill_normal(0, st.x_a);
    NoiseStream{4, 85, 1}.fill_normal(0, st.x_b);
    st.d_a = Mat::Zero(1, 3);
    st.d_b = Mat::Zero(1, 3);
    st.t = 6;
    st.cond_a = 1;
    st.cond_b = 3;
    st.guidance = 2.5;

    TwoActorPrediction pred = two_person_denoise(pa, pb, c, st);
    CHECK(pred.x0_a == cfg_predict(pa, st.x_a, st.t, 1, 2.5));
    CHECK(pred.x0_b == cfg_predict(pb, st.x_b, st.t, 3, 2.5));
    CHECK(pred.d0_a.isZero(0));
    CHECK(pred.d0_b.isZero(0));

    // trained comm weights break the factorization
    CommParams trained = c;
    NoiseStream{4, 86, 0}.fill_normal(0, trained.out_w);
    trained.out_w *= 0.5;
    TwoActorPrediction pred2 = two_person_denoise(pa, pb, trained, st);
    CHECK((pred2.x0_a - pred.x0_a).norm() > 1e-8);

    // validation: mismatched shapes and bad tap
    TwoActorState bad = st;
    bad.x_b = st.x_b.topRows(3);
    CHECK_THROWS_AS(two_person_denoise(pa, pb, c, bad), ValidationError);
    CommParams wide = init_comm(tiny_comm(), 7);
    wide.cfg.tap = 9;
    CHECK_THROWS_AS(two_person_denoise(pa, pb, wide, st), ValidationError);
}

TEST_CASE("training keeps priors frozen and matches the zero-comm loss oracle") {
    DenoiserParams pa = init_params(tiny_prior(), 4);
    DenoiserParams pb = init_params(tiny_prior(), 5);
    NoiseSchedule s = make_schedule(10);
    PairDataset data = build_pair_dataset(standard_pair_classes(), 1, 16, 99);

    CommParams c = init_comm(tiny_comm(), 7);
    TrainConfig tc;
    tc.steps = 1;
    tc.batch = 3;
    tc.lr = 0;
    uint64_t seed = 55;
    auto log = train_commdm(pa, pb, c, data, s, tc, seed);
    REQUIRE(log.size() == 1);

    // oracle: with the correction and pose heads still at zero, the joint pass
    // collapses to each prior alone and the pose loss to the target norms
    Scalar simple = 0, dloss = 0;
    for (int b = 0; b < tc.batch; ++b) {
        NoiseStream pick{seed, kStreamTrainBatch, uint32_t(b)};
        const PairSample& pr = data.pairs[pick.uniform_index(0, 0, data.pairs.size())];
        NoiseStream ts{seed, kStreamTrainT, uint32_t(b)};
        int t = 1 + int(ts.uniform_index(0, 0, s.T));
        Motion na = normalize(pr.a, data.stats), nb = normalize(pr.b, data.stats);
        Mat da(1, 3), db(1, 3);
        da << (pr.d_a.x - data.d_mean(0)) / data.d_std(0),
            (pr.d_a.z - data.d_mean(1)) / data.d_std(1),
            (pr.d_a.heading - data.d_mean(2)) / data.d_std(2);
        db << (pr.d_b.x - data.d_mean(0)) / data.d_std(0),
            (pr.d_b.z - data.d_mean(1)) / data.d_std(1),
            (pr.d_b.heading - data.d_mean(2)) / data.d_std(2);

        Mat eps_a(16, 36), eps_b(16, 36);
        NoiseStream{seed, kStreamTrainEps, 2 * uint32_t(b)}.fill_normal(0, eps_a);
        NoiseStream{seed, kStreamTrainEps, 2 * uint32_t(b) + 1}.fill_normal(0, eps_b);
        std::optional<int> cond_a = na.label, cond_b = nb.label;
        NoiseStream drop{seed, kStreamTrainDrop, uint32_t(b)};
        if (drop.uniform(0, 0) < tc.cond_drop) cond_a = std::nullopt;
        if (drop.uniform(0, 1) < tc.cond_drop) cond_b = std::nullopt;

        Mat ya = denoise(pa, forward_noise(s, na.frames, t, eps_a), t, cond_a);
        Mat yb = denoise(pb, forward_noise(s, nb.frames, t, eps_b), t, cond_b);
        simple += (ya - na.frames).array().square().mean() +
                  (yb - nb.frames).array().square().mean();
        dloss += da.squaredNorm() + db.squaredNorm();
    }
    CHECK(log[0].simple == doctest::Approx(simple / tc.batch).epsilon(1e-12));
    CHECK(log[0].d == doctest::Approx(dloss / tc.batch).epsilon(1e-12));
    CHECK(log[0].total == log[0].simple + log[0].d);

    // lr == 0 leaves the block bit-exact
    CommParams before = init_comm(tiny_comm(), 7);
    bool same = true;
    size_t idx = 0;
    std::vector<const Mat*> ws;
    c.for_each([&](const std::string&, const Mat& m) { ws.push_back(&m); });
    before.for_each([&](const std::string&, const Mat& m) {
        if (!(*ws[idx] == m)) same = false;
        ++idx;
    });
    CHECK(same);

    // real updates move the trainable heads
    TrainConfig go = tc;
    go.steps = 4;
    go.lr = 1e-3;
    auto log2 = train_commdm(pa, pb, c, data, s, go, seed);
    CHECK(log2.size() == 4);
    CHECK(c.out_w.norm() > 0);
    for (const auto& row : log2) CHECK(std::isfinite(row.total));
}

TEST_CASE("two-person sampling with a zero comm block equals independent sampling") {
    DenoiserParams pa = init_params(tiny_prior(), 4);
    DenoiserParams pb = init_params(tiny_prior(), 5);
    NoiseSchedule s = make_schedule(10);
    PairDataset data = build_pair_dataset(standard_pair_classes(), 1, 16, 99);
    CommParams c = init_comm(tiny_comm(), 7);

    TwoPersonSampleConfig sc;
    sc.frames = 16;
    sc.guidance = 2.0;
    sc.seed = 41;
    sc.base_sample_index = 6;
    sc.cond_a = 1;
    sc.cond_b = 2;
    TwoPersonSample got = sample_two_person(pa, pb, c, s, data, sc);

    Mat ref_a = sample_batch(pa, s, {1}, {16}, 2.0, sc.seed, 6)[0];
    Mat ref_b = sample_batch(pb, s, {2}, {16}, 2.0, sc.seed, 7)[0];
    Motion ma, mb;
    ma.layout = data.layout;
    ma.frames = ref_a;
    mb.layout = data.layout;
    mb.frames = ref_b;
    CHECK(got.a.frames == denormalize(ma, data.stats).frames);
    CHECK(got.b.frames == denormalize(mb, data.stats).frames);

    TwoPersonSample again = sample_two_person(pa, pb, c, s, data, sc);
    CHECK(again.a.frames == got.a.frames);
    CHECK(again.pose_a.x == got.pose_a.x);
    CHECK(again.pose_a.heading == got.pose_a.heading);
}

TEST_CASE("prefix completion anchors the prefix and ignores the labels") {
    DenoiserParams pa = init_params(tiny_prior(), 4);
    DenoiserParams pb = init_params(tiny_prior(), 5);
    NoiseSchedule s = make_schedule(10);
    PairDataset data = build_pair_dataset(standard_pair_classes(), 1, 16, 99);
    CommConfig cc = tiny_comm();
    cc.task = CommTask::kPrefixCompletion;
    cc.prefix_frames = 4;
    CommParams c = init_comm(cc, 7);

    Mat prefix_a = normalize(data.pairs[0].a, data.stats).frames.topRows(4);
    Mat prefix_b = normalize(data.pairs[0].b, data.stats).frames.topRows(4);

    TwoPersonSampleConfig sc;
    sc.frames = 16;
    sc.seed = 43;
    sc.prefix_a = &prefix_a;
    sc.prefix_b = &prefix_b;
    TwoPersonSample got = sample_two_person(pa, pb, c, s, data, sc);

    Motion pm;
    pm.layout = data.layout;
    pm.frames = prefix_a;
    CHECK(got.a.frames.topRows(4) == denormalize(pm, data.stats).frames);

    // the condition labels must not matter under prefix completion
    TwoPersonSampleConfig labeled = sc;
    labeled.cond_a = 3;
    labeled.cond_b = 5;
    TwoPersonSample relabeled = sample_two_person(pa, pb, c, s, data, labeled);
    CHECK(relabeled.a.frames == got.a.frames);
    CHECK(relabeled.b.frames == got.b.frames);

    TwoPersonSampleConfig bad = sc;
    bad.prefix_b = nullptr;
    CHECK_THROWS_AS(sample_two_person(pa, pb, c, s, data, bad), ValidationError);
    Mat too_long = Mat::Zero(16, 36);
    bad = sc;
    bad.prefix_a = &too_long;
    bad.prefix_b = &too_long;
    CHECK_THROWS_AS(sample_two_person(pa, pb, c, s, data, bad), ValidationError);
}

TEST_CASE("comm checkpoints round-trip byte-stably") {
    CommConfig cc = tiny_comm();
    cc.task = CommTask::kPrefixCompletion;
    cc.prefix_frames = 12;
    CommParams c = init_comm(cc, 31);
    NoiseStream{6, 87, 0}.fill_normal(0, c.out_w);

    const std::string path = "comm_rt.bin";
    save_comm(c, path);
    CommParams loaded = load_comm(path);
    CHECK(loaded.cfg.tap == cc.tap);
    CHECK(loaded.cfg.task == CommTask::kPrefixCompletion);
    CHECK(loaded.cfg.prefix_frames == 12);

    std::vector<const Mat*> orig;
    c.for_each([&](const std::string&, const Mat& m) { orig.push_back(&m); });
    size_t i = 0;
    loaded.for_each([&](const std::string&, const Mat& m) {
        CHECK((m - *orig[i]).cwiseAbs().maxCoeff() < 1e-6);  // f32 rounding
        ++i;
    });

    const std::string path2 = "comm_rt2.bin";
    save_comm(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    CHECK_THROWS_AS(load_comm("does_not_exist.bin"), IoError);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}
