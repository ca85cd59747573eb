#include "compose/blending.hpp"

#include "compose/rng.hpp"

namespace compose {

void BlendModelSpec::validate(int channels) const {
    if (!model) throw ValidationError("blend side has no model");
    if (model->cfg.channels != channels)
        throw ValidationError("blend models disagree on channel count");
    if ((mask == nullptr) != (given == nullptr))
        throw ValidationError("blend mask and held features must be given together");
    if (cond && (*cond < 0 || *cond >= model->cfg.classes))
        throw ValidationError("blend condition out of range");
}

namespace {

// The model's view of the shared state: masked entries replaced by the held
// features at the current noise level.
Mat model_view(const BlendModelSpec& spec, const NoiseSchedule& sched, const Mat& x_t, int t,
               const Mat* dense_mask) {
    if (!dense_mask) return x_t;
    Scalar scale = std::sqrt(sched.abar(t));
    return (1.0 - dense_mask->array()) * x_t.array() +
           dense_mask->array() * (scale * spec.given->array());
}

Mat dense_or_empty(const BlendModelSpec& spec, int frames, Mat& storage) {
    if (!spec.mask) return Mat();
    FeatureLayout layout = FeatureLayout::standard(6, 30);
    storage = spec.mask->dense(frames, layout);
    if (spec.given->rows() != frames || spec.given->cols() != layout.total_channels)
        throw ValidationError("blend held features must be frames x channels");
    return storage;
}

}  // namespace

Mat blend_predict(const BlendModelSpec& a, const BlendModelSpec& b, const NoiseSchedule& sched,
                  const Mat& x_t, int t, Scalar s) {
    a.validate(int(x_t.cols()));
    b.validate(int(x_t.cols()));
    Mat ma, mb;
    const Mat* da = a.mask ? &(ma = a.mask->dense(int(x_t.rows()), FeatureLayout::standard(6, 30))) : nullptr;
    const Mat* db = b.mask ? &(mb = b.mask->dense(int(x_t.rows()), FeatureLayout::standard(6, 30))) : nullptr;
    if (s == 0)
        return cfg_predict(*a.model, model_view(a, sched, x_t, t, da), t, a.cond, a.guidance);
    if (s == 1)
        return cfg_predict(*b.model, model_view(b, sched, x_t, t, db), t, b.cond, b.guidance);
    Mat x0_a = cfg_predict(*a.model, model_view(a, sched, x_t, t, da), t, a.cond, a.guidance);
    Mat x0_b = cfg_predict(*b.model, model_view(b, sched, x_t, t, db), t, b.cond, b.guidance);
    return guided_combine(x0_a, x0_b, s);
}

BlendResult blend_sample(const BlendModelSpec& a, const BlendModelSpec& b,
                         const NoiseSchedule& sched, const BlendConfig& cfg) {
    const int channels = a.model ? a.model->cfg.channels : 0;
    a.validate(channels);
    b.validate(channels);
    if (cfg.frames <= 0) throw ValidationError("blend frame count must be positive");

    Mat ma_store, mb_store;
    Mat ma = dense_or_empty(a, cfg.frames, ma_store);
    Mat mb = dense_or_empty(b, cfg.frames, mb_store);
    const Mat* da = a.mask ? &ma : nullptr;
    const Mat* db = b.mask ? &mb : nullptr;

    auto anchor = [&](Mat& x, int t) {
        Scalar scale = std::sqrt(sched.abar(t));
        if (da) x = (1.0 - da->array()) * x.array() + da->array() * (scale * a.given->array());
        if (db) x = (1.0 - db->array()) * x.array() + db->array() * (scale * b.given->array());
    };

    Mat x(cfg.frames, channels);
    NoiseStream init{cfg.seed, kStreamSampleInit, cfg.sample_index};
    init.fill_normal(uint32_t(sched.T), x);

    BlendResult out;
    Mat z;
    for (int t = sched.T; t >= 1; --t) {
        Mat x0_hat = blend_predict(a, b, sched, x, t, cfg.s);
        if (!x0_hat.allFinite()) throw NumericalError("blended sampling diverged", sched.T - t);
        if (t > 1) {
            z.resize(cfg.frames, channels);
            NoiseStream zs{cfg.seed, kStreamSampleStep, cfg.sample_index};
            zs.fill_normal(uint32_t(t), z);
        }
        x = ddpm_step(sched, x, x0_hat, t, z);
        if (t == 1) {
            if (da) {
                Mat dev = (x - *a.given).array() * da->array();
                out.adherence_a = std::sqrt(dev.squaredNorm() / da->sum());
            }
            if (db) {
                Mat dev = (x - *b.given).array() * db->array();
                out.adherence_b = std::sqrt(dev.squaredNorm() / db->sum());
            }
        }
        anchor(x, t - 1);
    }
    out.frames = std::move(x);
    return out;
}

}  // namespace compose
