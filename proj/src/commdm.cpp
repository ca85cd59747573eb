#include "compose/commdm.hpp"

#include <sstream>

#include <json.hpp>

#include "compose/optim.hpp"
#include "compose/rng.hpp"

namespace compose {

void CommConfig::validate(const DenoiserConfig& prior) const {
    if (tap < 1 || tap > prior.layers)
        throw ValidationError("comm tap layer " + std::to_string(tap) + " out of [1," +
                              std::to_string(prior.layers) + "]");
    if (comm_layers < 1) throw ValidationError("comm needs at least one layer");
    if (latent != prior.latent) throw ValidationError("comm width must match the prior");
    if (heads < 1 || latent % heads != 0)
        throw ValidationError("comm heads must divide the width");
}

CommParams init_comm(const CommConfig& cfg, uint64_t seed) {
    const int d = cfg.latent;
    CommParams c;
    c.cfg = cfg;
    c.role_emb.resize(2, d);
    NoiseStream role{seed, kStreamInit, 0};
    role.fill_normal(0, c.role_emb);
    c.role_emb *= 0.02;
    c.d_in_w.resize(3, d);
    NoiseStream din{seed, kStreamInit, 1};
    Scalar bound = std::sqrt(6.0 / (3 + d));
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < d; ++col)
            c.d_in_w(r, col) = bound * (2 * din.uniform(0, uint64_t(r) * d + col) - 1);
    c.d_in_b = Mat::Zero(1, d);
    for (int l = 0; l < cfg.comm_layers; ++l)
        c.layers.push_back(encoder_layer_init(d, 4 * d, seed, 100 + 16 * uint32_t(l)));
    c.out_w = Mat::Zero(d, d);
    c.out_b = Mat::Zero(1, d);
    c.d_out_w = Mat::Zero(d, 3);
    c.d_out_b = Mat::Zero(1, 3);
    return c;
}

CommParams comm_zeros_like(const CommParams& c) {
    CommParams z = c;
    z.for_each([](const std::string&, Mat& m) { m.setZero(); });
    return z;
}

CommOutput comm_forward(const CommParams& c, const Mat& o_self, const Mat& o_other,
                        const Mat& d_self_t, int t, CommTape* tape) {
    const long n = o_self.rows();
    const int d = c.cfg.latent;
    if (o_other.rows() != n || o_self.cols() != d || o_other.cols() != d)
        throw ValidationError("comm_forward: activation shape mismatch");
    if (d_self_t.rows() != 1 || d_self_t.cols() != 3)
        throw ValidationError("comm_forward: initial pose must be 1 x 3");

    Mat seq(2 * n + 1, d);
    seq.topRows(n) = o_self.rowwise() + c.role_emb.row(0);
    seq.middleRows(n, n) = o_other.rowwise() + c.role_emb.row(1);
    seq.row(2 * n) = d_self_t * c.d_in_w + c.d_in_b + sinusoidal_embedding(t, d);

    if (tape) {
        tape->seq_in = seq;
        tape->d_token_in = d_self_t;
        tape->layers.resize(c.layers.size());
    }
    Mat h = seq;
    for (size_t l = 0; l < c.layers.size(); ++l)
        h = encoder_layer_forward(c.layers[l], c.cfg.heads, h, tape ? &tape->layers[l] : nullptr);
    if (tape) tape->seq_out = h;

    CommOutput out;
    out.delta_o = (h.topRows(n) * c.out_w).rowwise() + c.out_b.row(0);
    out.d_hat = h.row(2 * n) * c.d_out_w + c.d_out_b;
    return out;
}

void comm_backward(const CommParams& c, const CommTape& tape, const Mat& d_delta_o,
                   const Mat& d_d_hat, CommParams& grads) {
    const long n = d_delta_o.rows();
    const long total = tape.seq_out.rows();
    if (total != 2 * n + 1) throw ValidationError("comm_backward: tape/gradient size mismatch");

    Mat dh = Mat::Zero(total, c.cfg.latent);
    dh.topRows(n) = d_delta_o * c.out_w.transpose();
    grads.out_w += tape.seq_out.topRows(n).transpose() * d_delta_o;
    grads.out_b.row(0) += d_delta_o.colwise().sum();
    dh.row(2 * n) = d_d_hat * c.d_out_w.transpose();
    grads.d_out_w += tape.seq_out.row(2 * n).transpose() * d_d_hat;
    grads.d_out_b.row(0) += d_d_hat;

    for (int l = int(c.layers.size()) - 1; l >= 0; --l)
        dh = encoder_layer_backward(c.layers[l], c.cfg.heads, tape.layers[l], dh, &grads.layers[l]);

    grads.role_emb.row(0) += dh.topRows(n).colwise().sum();
    grads.role_emb.row(1) += dh.middleRows(n, n).colwise().sum();
    grads.d_in_w += tape.d_token_in.transpose() * dh.row(2 * n);
    grads.d_in_b.row(0) += dh.row(2 * n);
}

namespace {

struct ExchangeResult {
    Mat x0_a, x0_b, d0_a, d0_b;
};

// One full joint pass at a fixed condition pair.
ExchangeResult exchange(const DenoiserParams& pa, const DenoiserParams& pb, const CommParams& comm,
                        const TwoActorState& st, std::optional<int> ca, std::optional<int> cb) {
    auto [sa, oa] = forward_to(pa, st.x_a, st.t, ca, nullptr, comm.cfg.tap);
    auto [sb, ob] = forward_to(pb, st.x_b, st.t, cb, nullptr, comm.cfg.tap);
    CommOutput fa = comm_forward(comm, oa, ob, st.d_a, st.t);
    CommOutput fb = comm_forward(comm, ob, oa, st.d_b, st.t);
    ExchangeResult r;
    r.x0_a = forward_from(pa, sa, oa + fa.delta_o);
    r.x0_b = forward_from(pb, sb, ob + fb.delta_o);
    r.d0_a = fa.d_hat;
    r.d0_b = fb.d_hat;
    return r;
}

}  // namespace

TwoActorPrediction two_person_denoise(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                      const CommParams& comm, const TwoActorState& state) {
    comm.cfg.validate(prior_a.cfg);
    comm.cfg.validate(prior_b.cfg);
    if (state.x_a.rows() != state.x_b.rows() || state.x_a.cols() != state.x_b.cols())
        throw ValidationError("two_person_denoise: actors must share frame count and layout");

    auto pack = [](ExchangeResult&& r) {
        return TwoActorPrediction{std::move(r.x0_a), std::move(r.x0_b), std::move(r.d0_a),
                                  std::move(r.d0_b)};
    };
    const Scalar s = state.guidance;
    if (!state.cond_a && !state.cond_b)
        return pack(exchange(prior_a, prior_b, comm, state, std::nullopt, std::nullopt));
    if (s == 1)
        return pack(exchange(prior_a, prior_b, comm, state, state.cond_a, state.cond_b));
    ExchangeResult u = exchange(prior_a, prior_b, comm, state, std::nullopt, std::nullopt);
    if (s == 0) return pack(std::move(u));
    ExchangeResult c = exchange(prior_a, prior_b, comm, state, state.cond_a, state.cond_b);
    TwoActorPrediction out;
    out.x0_a = guided_combine(u.x0_a, c.x0_a, s);
    out.x0_b = guided_combine(u.x0_b, c.x0_b, s);
    out.d0_a = guided_combine(u.d0_a, c.d0_a, s);
    out.d0_b = guided_combine(u.d0_b, c.d0_b, s);
    return out;
}

namespace {

Mat normalize_pose(const PlanarPose& p, const Vec& mean, const Vec& std) {
    Mat d(1, 3);
    d << (p.x - mean(0)) / std(0), (p.z - mean(1)) / std(1), (p.heading - mean(2)) / std(2);
    return d;
}

PlanarPose denormalize_pose(const Mat& d, const Vec& mean, const Vec& std) {
    return {d(0, 0) * std(0) + mean(0), d(0, 1) * std(1) + mean(1), d(0, 2) * std(2) + mean(2)};
}

}  // namespace

std::vector<CommLossRow> train_commdm(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                      CommParams& comm, const PairDataset& data,
                                      const NoiseSchedule& schedule, const TrainConfig& cfg,
                                      uint64_t seed) {
    comm.cfg.validate(prior_a.cfg);
    comm.cfg.validate(prior_b.cfg);
    if (data.pairs.empty()) throw ValidationError("train_commdm: empty paired dataset");
    const long F = data.pairs[0].a.frames.rows();
    const int C = data.layout.total_channels;
    for (const auto& p : data.pairs)
        if (p.a.frames.rows() != F || p.b.frames.rows() != F || p.a.frames.cols() != C ||
            p.b.frames.cols() != C)
            throw ValidationError("train_commdm: paired motions must share shape");

    const bool prefix = comm.cfg.task == CommTask::kPrefixCompletion;
    const int k = prefix ? std::min<int>(comm.cfg.prefix_frames, int(F)) : 0;

    // normalized copies; the priors were trained in normalized space
    struct NormPair {
        Motion a, b;
        Mat d_a, d_b;  // 1 x 3
    };
    std::vector<NormPair> train_set;
    for (const auto& p : data.pairs)
        train_set.push_back({normalize(p.a, data.stats), normalize(p.b, data.stats),
                             normalize_pose(p.d_a, data.d_mean, data.d_std),
                             normalize_pose(p.d_b, data.d_mean, data.d_std)});

    std::vector<CommLossRow> log;
    Adam adam;
    CommParams grads = comm_zeros_like(comm);
    std::vector<Mat*> param_ptrs, grad_ptrs;
    comm.for_each([&](const std::string&, Mat& w) { param_ptrs.push_back(&w); });
    grads.for_each([&](const std::string&, Mat& g) { grad_ptrs.push_back(&g); });

    Mat eps_a(F, C), eps_b(F, C);
    DenoiserTape tape_a, tape_b;
    for (int step = 0; step < cfg.steps; ++step) {
        grads.for_each([](const std::string&, Mat& g) { g.setZero(); });
        Scalar sum_simple = 0, sum_d = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            NoiseStream pick{seed, kStreamTrainBatch, uint32_t(b)};
            const NormPair& pr = train_set[pick.uniform_index(uint32_t(step), 0, train_set.size())];
            NoiseStream ts{seed, kStreamTrainT, uint32_t(b)};
            int t = 1 + int(ts.uniform_index(uint32_t(step), 0, schedule.T));
            NoiseStream ea{seed, kStreamTrainEps, 2 * uint32_t(b)};
            NoiseStream eb{seed, kStreamTrainEps, 2 * uint32_t(b) + 1};
            ea.fill_normal(uint32_t(step), eps_a);
            eb.fill_normal(uint32_t(step), eps_b);
            if (prefix) {
                eps_a.topRows(k).setZero();
                eps_b.topRows(k).setZero();
            }
            Mat eps_da(1, 3), eps_db(1, 3);
            NoiseStream da{seed, kStreamDTrainEps, 2 * uint32_t(b)};
            NoiseStream db{seed, kStreamDTrainEps, 2 * uint32_t(b) + 1};
            da.fill_normal(uint32_t(step), eps_da);
            db.fill_normal(uint32_t(step), eps_db);

            std::optional<int> cond_a = pr.a.label, cond_b = pr.b.label;
            if (prefix || cfg.force_null_cond) {
                cond_a = cond_b = std::nullopt;
            } else {
                NoiseStream ds{seed, kStreamTrainDrop, uint32_t(b)};
                if (ds.uniform(uint32_t(step), 0) < cfg.cond_drop) cond_a = std::nullopt;
                if (ds.uniform(uint32_t(step), 1) < cfg.cond_drop) cond_b = std::nullopt;
            }

            Mat x_a = forward_noise(schedule, pr.a.frames, t, eps_a);
            Mat x_b = forward_noise(schedule, pr.b.frames, t, eps_b);
            Mat d_a = forward_noise(schedule, pr.d_a, t, eps_da);
            Mat d_b = forward_noise(schedule, pr.d_b, t, eps_db);

            auto [sa, oa] = forward_to(prior_a, x_a, t, cond_a, nullptr, comm.cfg.tap);
            auto [sb, ob] = forward_to(prior_b, x_b, t, cond_b, nullptr, comm.cfg.tap);
            CommTape ct_a, ct_b;
            CommOutput fa = comm_forward(comm, oa, ob, d_a, t, &ct_a);
            CommOutput fb = comm_forward(comm, ob, oa, d_b, t, &ct_b);
            Corrections corr_a{{comm.cfg.tap, fa.delta_o}};
            Corrections corr_b{{comm.cfg.tap, fb.delta_o}};
            Mat y_a = forward_train(prior_a, x_a, t, cond_a, nullptr, tape_a, &corr_a);
            Mat y_b = forward_train(prior_b, x_b, t, cond_b, nullptr, tape_b, &corr_b);

            Mat diff_a = y_a - pr.a.frames;
            Mat diff_b = y_b - pr.b.frames;
            sum_simple += diff_a.array().square().mean() + diff_b.array().square().mean();
            sum_d += (fa.d_hat - pr.d_a).squaredNorm() + (fb.d_hat - pr.d_b).squaredNorm();

            Mat dy_a = (2.0 / Scalar(diff_a.size() * cfg.batch)) * diff_a;
            Mat dy_b = (2.0 / Scalar(diff_b.size() * cfg.batch)) * diff_b;
            Mat dcorr_a = backward_to_tap(prior_a, tape_a, dy_a, comm.cfg.tap);
            Mat dcorr_b = backward_to_tap(prior_b, tape_b, dy_b, comm.cfg.tap);
            Mat dd_a = (2.0 / Scalar(cfg.batch)) * (fa.d_hat - pr.d_a);
            Mat dd_b = (2.0 / Scalar(cfg.batch)) * (fb.d_hat - pr.d_b);
            comm_backward(comm, ct_a, dcorr_a, dd_a, grads);
            comm_backward(comm, ct_b, dcorr_b, dd_b, grads);
        }
        CommLossRow row;
        row.step = step;
        row.simple = sum_simple / cfg.batch;
        row.d = sum_d / cfg.batch;
        row.total = row.simple + row.d;
        if (!std::isfinite(row.total))
            throw NumericalError("train_commdm: non-finite loss at step " + std::to_string(step),
                                 step);
        log.push_back(row);
        if (cfg.lr != 0) adam.update(param_ptrs, grad_ptrs, cfg.lr);
    }
    return log;
}

void write_comm_loss_csv(const std::vector<CommLossRow>& log, const std::string& path) {
    std::ostringstream out;
    out << "step,L_simple,L_d,total\n";
    for (const auto& r : log) out << r.step << "," << r.simple << "," << r.d << "," << r.total << "\n";
    atomic_write(path, out.str());
}

TwoPersonSample sample_two_person(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                  const CommParams& comm, const NoiseSchedule& schedule,
                                  const PairDataset& data_stats, const TwoPersonSampleConfig& cfg) {
    comm.cfg.validate(prior_a.cfg);
    comm.cfg.validate(prior_b.cfg);
    const int C = prior_a.cfg.channels;
    if ((cfg.prefix_a == nullptr) != (cfg.prefix_b == nullptr))
        throw ValidationError("sample_two_person: both prefixes or neither");
    const bool prefix = cfg.prefix_a != nullptr;
    int k = 0;
    if (prefix) {
        k = int(cfg.prefix_a->rows());
        if (int(cfg.prefix_b->rows()) != k || cfg.prefix_a->cols() != C ||
            cfg.prefix_b->cols() != C || k <= 0 || k >= cfg.frames)
            throw ValidationError("sample_two_person: bad prefix shape");
    }

    TwoActorState st;
    st.guidance = cfg.guidance;
    st.cond_a = prefix ? std::nullopt : cfg.cond_a;
    st.cond_b = prefix ? std::nullopt : cfg.cond_b;
    st.x_a.resize(cfg.frames, C);
    st.x_b.resize(cfg.frames, C);
    NoiseStream ia{cfg.seed, kStreamSampleInit, cfg.base_sample_index};
    NoiseStream ib{cfg.seed, kStreamSampleInit, cfg.base_sample_index + 1};
    ia.fill_normal(uint32_t(schedule.T), st.x_a);
    ib.fill_normal(uint32_t(schedule.T), st.x_b);
    st.d_a.resize(1, 3);
    st.d_b.resize(1, 3);
    NoiseStream dia{cfg.seed, kStreamDInit, cfg.base_sample_index};
    NoiseStream dib{cfg.seed, kStreamDInit, cfg.base_sample_index + 1};
    dia.fill_normal(uint32_t(schedule.T), st.d_a);
    dib.fill_normal(uint32_t(schedule.T), st.d_b);

    auto anchor = [&](int level) {
        if (!prefix) return;
        Scalar scale = std::sqrt(schedule.abar(level));
        st.x_a.topRows(k) = scale * (*cfg.prefix_a);
        st.x_b.topRows(k) = scale * (*cfg.prefix_b);
    };
    anchor(schedule.T);

    Mat z(cfg.frames, C), zd(1, 3);
    for (int t = schedule.T; t >= 1; --t) {
        st.t = t;
        TwoActorPrediction pred = two_person_denoise(prior_a, prior_b, comm, st);
        if (!pred.x0_a.allFinite() || !pred.x0_b.allFinite())
            throw NumericalError("two-person sampling diverged", schedule.T - t);
        NoiseStream za{cfg.seed, kStreamSampleStep, cfg.base_sample_index};
        NoiseStream zb{cfg.seed, kStreamSampleStep, cfg.base_sample_index + 1};
        NoiseStream zda{cfg.seed, kStreamDStep, cfg.base_sample_index};
        NoiseStream zdb{cfg.seed, kStreamDStep, cfg.base_sample_index + 1};
        if (t > 1) za.fill_normal(uint32_t(t), z);
        st.x_a = ddpm_step(schedule, st.x_a, pred.x0_a, t, z);
        if (t > 1) zb.fill_normal(uint32_t(t), z);
        st.x_b = ddpm_step(schedule, st.x_b, pred.x0_b, t, z);
        if (t > 1) zda.fill_normal(uint32_t(t), zd);
        st.d_a = ddpm_step(schedule, st.d_a, pred.d0_a, t, zd);
        if (t > 1) zdb.fill_normal(uint32_t(t), zd);
        st.d_b = ddpm_step(schedule, st.d_b, pred.d0_b, t, zd);
        anchor(t - 1);
    }

    TwoPersonSample out;
    out.a.layout = data_stats.layout;
    out.a.frames = st.x_a;
    out.a.label = cfg.cond_a;
    out.b.layout = data_stats.layout;
    out.b.frames = st.x_b;
    out.b.label = cfg.cond_b;
    out.a = denormalize(out.a, data_stats.stats);
    out.b = denormalize(out.b, data_stats.stats);
    out.pose_a = denormalize_pose(st.d_a, data_stats.d_mean, data_stats.d_std);
    out.pose_b = denormalize_pose(st.d_b, data_stats.d_mean, data_stats.d_std);
    for (Motion* m : {&out.a, &out.b}) {
        m->meta["seed"] = std::to_string(cfg.seed);
        m->meta["base_sample_index"] = std::to_string(cfg.base_sample_index);
    }
    return out;
}

void save_comm(const CommParams& c, const std::string& path) {
    TensorFile f;
    f.kind = "comm";
    nlohmann::json cj{{"tap", c.cfg.tap},
                      {"comm_layers", c.cfg.comm_layers},
                      {"latent", c.cfg.latent},
                      {"heads", c.cfg.heads},
                      {"task", c.cfg.task == CommTask::kPrefixCompletion ? "prefix_completion"
                                                                         : "label_to_motion"},
                      {"prefix_frames", c.cfg.prefix_frames}};
    f.config_json = cj.dump();
    c.for_each([&](const std::string& n, const Mat& m) { f.tensors.emplace_back(n, m); });
    save_tensor_file(f, path);
}

CommParams load_comm(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    if (f.kind != "comm") throw IoError(path + ": not a comm checkpoint (kind '" + f.kind + "')");
    CommConfig cfg;
    try {
        nlohmann::json j = nlohmann::json::parse(f.config_json);
        cfg.tap = j.at("tap").get<int>();
        cfg.comm_layers = j.at("comm_layers").get<int>();
        cfg.latent = j.at("latent").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.task = j.at("task").get<std::string>() == "prefix_completion"
                       ? CommTask::kPrefixCompletion
                       : CommTask::kLabelToMotion;
        cfg.prefix_frames = j.at("prefix_frames").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": bad comm config: " + e.what());
    }
    CommParams c = init_comm(cfg, 0);
    size_t i = 0;
    c.for_each([&](const std::string& n, Mat& m) {
        if (i >= f.tensors.size() || f.tensors[i].first != n)
            throw IoError(path + ": unexpected tensor order at '" + n + "'");
        const Mat& src = f.tensors[i].second;
        if (src.rows() != m.rows() || src.cols() != m.cols())
            throw IoError(path + ": tensor '" + n + "' shape mismatch");
        m = src;
        ++i;
    });
    if (i != f.tensors.size()) throw IoError(path + ": trailing tensors in comm checkpoint");
    return c;
}

}  // namespace compose
