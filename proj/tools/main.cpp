// prior-compose: operator CLI for dataset generation, prior training,
// composition (long-form, controlled, blended, two-person) and evaluation.
//
// One command per process. All randomness flows from the --seed value through
// counter-based streams, so re-running a command with the same config and seed
// reproduces its artifacts byte for byte.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "compose/blending.hpp"
#include "compose/checkpoint.hpp"
#include "compose/commdm.hpp"
#include "compose/control.hpp"
#include "compose/doubletake.hpp"
#include "compose/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace compose;

namespace {

// ---------------------------------------------------------------------------
// config plumbing

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file " + path);
    try {
        json j;
        in >> j;
        if (!j.is_object()) throw ValidationError("config root must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config file ") + path + ": " + e.what());
    }
}

void set_dot_path(json& root, const std::string& dotted, const std::string& raw) {
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // bare strings need no quotes on the command line
    }
    json* node = &root;
    size_t start = 0;
    while (true) {
        size_t dot = dotted.find('.', start);
        std::string key = dotted.substr(start, dot - start);
        if (key.empty()) throw ValidationError("bad override key '" + dotted + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// Extra args of the form --a.b.c value (or --a.b.c=value) override config keys.
void apply_overrides(json& cfg, const std::vector<std::string>& extras) {
    for (size_t i = 0; i < extras.size(); ++i) {
        const std::string& a = extras[i];
        if (a.rfind("--", 0) != 0)
            throw ValidationError("unexpected argument '" + a + "' (overrides look like --key.path value)");
        std::string key = a.substr(2);
        auto eq = key.find('=');
        if (eq != std::string::npos) {
            set_dot_path(cfg, key.substr(0, eq), key.substr(eq + 1));
        } else {
            if (i + 1 >= extras.size())
                throw ValidationError("override '" + a + "' is missing a value");
            set_dot_path(cfg, key, extras[++i]);
        }
    }
}

template <class T>
T jget(const json& cfg, const std::string& dotted, T fallback) {
    const json* node = &cfg;
    size_t start = 0;
    while (true) {
        size_t dot = dotted.find('.', start);
        std::string key = dotted.substr(start, dot - start);
        auto it = node->find(key);
        if (it == node->end()) return fallback;
        if (dot == std::string::npos) {
            try {
                return it->get<T>();
            } catch (const json::exception& e) {
                throw ValidationError("config field '" + dotted + "': " + e.what());
            }
        }
        node = &*it;
        start = dot + 1;
    }
}

std::optional<int> cond_or_null(int c) {
    if (c < 0) return std::nullopt;
    return c;
}

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct RunContext {
    std::string command;
    json cfg;
    uint64_t seed = 0;
    std::string out_dir = ".";
    int threads = 1;
    std::vector<std::string> artifacts;

    std::string path(const std::string& name) const { return (fs::path(out_dir) / name).string(); }
    std::string emit(const std::string& name) {
        artifacts.push_back(path(name));
        return artifacts.back();
    }
};

void write_manifest(const RunContext& ctx, double wall_s) {
    json m;
    m["command"] = ctx.command;
    m["seed"] = ctx.seed;
    m["threads"] = ctx.threads;
    m["config"] = ctx.cfg;
    std::ostringstream hash;
    hash << std::hex << fnv1a64(ctx.cfg.dump());
    m["config_hash"] = hash.str();
    m["artifacts"] = ctx.artifacts;
    m["wall_time_s"] = wall_s;
    atomic_write(ctx.path("manifest.json"), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// dataset container (TensorFile, kind "dataset" / "pairs")

void save_dataset(const Dataset& ds, const std::string& path) {
    TensorFile f;
    f.kind = "dataset";
    json cfg{{"joint_count", ds.layout.joint_count}, {"fps", ds.layout.fps}};
    json labels = json::array(), clamped = json::array();
    for (const auto& m : ds.motions) labels.push_back(m.label ? *m.label : -1);
    for (int c : ds.stats.clamped_channels) clamped.push_back(c);
    cfg["labels"] = labels;
    cfg["clamped_channels"] = clamped;
    f.config_json = cfg.dump();
    f.tensors.emplace_back("mean", Mat(ds.stats.mean));
    f.tensors.emplace_back("std", Mat(ds.stats.std));
    for (size_t i = 0; i < ds.motions.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "motion%06zu", i);
        f.tensors.emplace_back(name, ds.motions[i].frames);
    }
    save_tensor_file(f, path);
}

Dataset load_dataset(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    if (f.kind != "dataset") throw IoError(path + ": not a dataset (kind '" + f.kind + "')");
    json cfg;
    try {
        cfg = json::parse(f.config_json);
    } catch (const json::exception& e) {
        throw IoError(path + ": bad dataset config: " + e.what());
    }
    Dataset ds;
    ds.layout = FeatureLayout::standard(cfg.at("joint_count").get<int>(), cfg.at("fps").get<int>());
    if (f.tensors.size() < 2 || f.tensors[0].first != "mean" || f.tensors[1].first != "std")
        throw IoError(path + ": dataset must start with mean/std tensors");
    ds.stats.mean = f.tensors[0].second.col(0);
    ds.stats.std = f.tensors[1].second.col(0);
    for (const auto& c : cfg.value("clamped_channels", json::array()))
        ds.stats.clamped_channels.push_back(c.get<int>());
    auto labels = cfg.at("labels");
    if (labels.size() + 2 != f.tensors.size())
        throw IoError(path + ": label count does not match motion count");
    for (size_t i = 2; i < f.tensors.size(); ++i) {
        Motion m;
        m.layout = ds.layout;
        m.frames = f.tensors[i].second;
        int label = labels[i - 2].get<int>();
        if (label >= 0) m.label = label;
        ds.motions.push_back(std::move(m));
    }
    return ds;
}

void save_pairs(const PairDataset& ds, const std::string& path) {
    TensorFile f;
    f.kind = "pairs";
    json cfg{{"joint_count", ds.layout.joint_count}, {"fps", ds.layout.fps}};
    json labels_a = json::array(), labels_b = json::array(), pair_class = json::array();
    for (const auto& p : ds.pairs) {
        labels_a.push_back(p.a.label ? *p.a.label : -1);
        labels_b.push_back(p.b.label ? *p.b.label : -1);
        pair_class.push_back(p.pair_class);
    }
    json clamped = json::array();
    for (int c : ds.stats.clamped_channels) clamped.push_back(c);
    cfg["labels_a"] = labels_a;
    cfg["labels_b"] = labels_b;
    cfg["pair_class"] = pair_class;
    cfg["clamped_channels"] = clamped;
    f.config_json = cfg.dump();
    f.tensors.emplace_back("mean", Mat(ds.stats.mean));
    f.tensors.emplace_back("std", Mat(ds.stats.std));
    f.tensors.emplace_back("d_mean", Mat(ds.d_mean));
    f.tensors.emplace_back("d_std", Mat(ds.d_std));
    Mat poses(ds.pairs.size(), 6);
    for (size_t i = 0; i < ds.pairs.size(); ++i)
        poses.row(i) << ds.pairs[i].d_a.x, ds.pairs[i].d_a.z, ds.pairs[i].d_a.heading,
            ds.pairs[i].d_b.x, ds.pairs[i].d_b.z, ds.pairs[i].d_b.heading;
    f.tensors.emplace_back("poses", poses);
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "a%06zu", i);
        f.tensors.emplace_back(name, ds.pairs[i].a.frames);
        std::snprintf(name, sizeof(name), "b%06zu", i);
        f.tensors.emplace_back(name, ds.pairs[i].b.frames);
    }
    save_tensor_file(f, path);
}

PairDataset load_pairs(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    if (f.kind != "pairs") throw IoError(path + ": not a paired dataset (kind '" + f.kind + "')");
    json cfg;
    try {
        cfg = json::parse(f.config_json);
    } catch (const json::exception& e) {
        throw IoError(path + ": bad paired-dataset config: " + e.what());
    }
    PairDataset ds;
    ds.layout = FeatureLayout::standard(cfg.at("joint_count").get<int>(), cfg.at("fps").get<int>());
    if (f.tensors.size() < 5) throw IoError(path + ": truncated paired dataset");
    ds.stats.mean = f.tensors[0].second.col(0);
    ds.stats.std = f.tensors[1].second.col(0);
    ds.d_mean = f.tensors[2].second.col(0);
    ds.d_std = f.tensors[3].second.col(0);
    for (const auto& c : cfg.value("clamped_channels", json::array()))
        ds.stats.clamped_channels.push_back(c.get<int>());
    const Mat& poses = f.tensors[4].second;
    auto la = cfg.at("labels_a");
    auto lb = cfg.at("labels_b");
    auto pc = cfg.at("pair_class");
    size_t n = la.size();
    if (f.tensors.size() != 5 + 2 * n || size_t(poses.rows()) != n)
        throw IoError(path + ": paired-dataset tensor count mismatch");
    for (size_t i = 0; i < n; ++i) {
        PairSample p;
        p.a.layout = ds.layout;
        p.b.layout = ds.layout;
        p.a.frames = f.tensors[5 + 2 * i].second;
        p.b.frames = f.tensors[6 + 2 * i].second;
        if (la[i].get<int>() >= 0) p.a.label = la[i].get<int>();
        if (lb[i].get<int>() >= 0) p.b.label = lb[i].get<int>();
        p.pair_class = pc[i].get<int>();
        p.d_a = {poses(i, 0), poses(i, 1), poses(i, 2)};
        p.d_b = {poses(i, 3), poses(i, 4), poses(i, 5)};
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// shared loaders

DenoiserConfig model_config(const json& cfg) {
    DenoiserConfig m;
    m.latent = jget(cfg, "model.latent", m.latent);
    m.heads = jget(cfg, "model.heads", m.heads);
    m.layers = jget(cfg, "model.layers", m.layers);
    m.ff = jget(cfg, "model.ff", m.ff);
    m.channels = jget(cfg, "model.channels", m.channels);
    m.max_frames = jget(cfg, "model.max_frames", m.max_frames);
    m.classes = jget(cfg, "model.classes", m.classes);
    m.validate();
    return m;
}

TrainConfig train_config(const json& cfg) {
    TrainConfig t;
    t.steps = jget(cfg, "train.steps", t.steps);
    t.batch = jget(cfg, "train.batch", t.batch);
    t.lr = jget(cfg, "train.lr", t.lr);
    t.lambda_pos = jget(cfg, "train.lambda_pos", t.lambda_pos);
    t.lambda_vel = jget(cfg, "train.lambda_vel", t.lambda_vel);
    t.lambda_foot = jget(cfg, "train.lambda_foot", t.lambda_foot);
    t.cond_drop = jget(cfg, "train.cond_drop", t.cond_drop);
    t.geometric = jget(cfg, "train.geometric", t.geometric);
    if (t.steps < 1 || t.batch < 1) throw ValidationError("config field 'train.steps'/'train.batch' must be positive");
    return t;
}

DenoiserParams load_prior(const json& cfg, const std::string& field, const std::string& fallback) {
    std::string path = jget<std::string>(cfg, field, fallback);
    if (path.empty()) throw ValidationError("config field '" + field + "' is required");
    return load_denoiser(path);
}

// Checkpoint vs data layout disagreements are file-level problems (exit 3).
void check_layout(const DenoiserParams& p, const FeatureLayout& layout, const std::string& what) {
    if (p.cfg.channels != layout.total_channels)
        throw IoError(what + ": checkpoint has " + std::to_string(p.cfg.channels) +
                      " channels but the dataset layout has " +
                      std::to_string(layout.total_channels));
}

std::vector<Motion> normalized_motions(const Dataset& ds) {
    std::vector<Motion> out;
    out.reserve(ds.motions.size());
    for (const auto& m : ds.motions) out.push_back(normalize(m, ds.stats));
    return out;
}

// ---------------------------------------------------------------------------
// commands

void cmd_gen_data(RunContext& ctx) {
    int per_class = jget(ctx.cfg, "data.samples_per_class", 200);
    int frames = jget(ctx.cfg, "data.frames", 120);
    bool pairs = jget(ctx.cfg, "data.pairs", false);
    if (pairs) {
        PairDataset ds = build_pair_dataset(standard_pair_classes(), per_class, frames, ctx.seed);
        save_pairs(ds, ctx.emit(jget<std::string>(ctx.cfg, "data.path", "pairs.bin")));
    } else {
        Dataset ds = build_dataset(standard_classes(true), per_class, frames, ctx.seed);
        save_dataset(ds, ctx.emit(jget<std::string>(ctx.cfg, "data.path", "dataset.bin")));
    }
}

void cmd_train(RunContext& ctx) {
    Dataset ds = load_dataset(jget<std::string>(ctx.cfg, "data.path", "dataset.bin"));
    DenoiserConfig mc = model_config(ctx.cfg);
    DenoiserParams p = init_params(mc, ctx.seed);
    check_layout(p, ds.layout, "train");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));
    auto log = train(p, normalized_motions(ds), sched, train_config(ctx.cfg), ctx.seed);
    save_denoiser(p, ctx.emit(jget<std::string>(ctx.cfg, "train.checkpoint", "prior.bin")));
    write_loss_log_csv(log, ctx.emit("train_loss.csv"));
}

void cmd_finetune(RunContext& ctx) {
    Dataset ds = load_dataset(jget<std::string>(ctx.cfg, "data.path", "dataset.bin"));
    DenoiserParams p = load_prior(ctx.cfg, "finetune.checkpoint", "prior.bin");
    check_layout(p, ds.layout, "finetune");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));
    ControlTask task = ControlTask::parse(jget<std::string>(ctx.cfg, "control.task", "trajectory"));
    ControlMask mask = make_mask(task, ds.layout);
    TrainConfig tc = train_config(ctx.cfg);
    if (task.name == "prefix") tc.force_null_cond = true;
    auto log = finetune_control(p, mask, normalized_motions(ds), sched, tc, ctx.seed);
    save_denoiser(p, ctx.emit(jget<std::string>(ctx.cfg, "finetune.out_checkpoint", "finetuned.bin")));
    write_loss_log_csv(log, ctx.emit("finetune_loss.csv"));
}

CommConfig comm_config(const json& cfg, const DenoiserConfig& prior) {
    CommConfig c;
    c.tap = jget(cfg, "comm.tap", prior.layers);
    c.comm_layers = jget(cfg, "comm.comm_layers", c.comm_layers);
    c.latent = jget(cfg, "comm.latent", prior.latent);
    c.heads = jget(cfg, "comm.heads", c.heads);
    c.task = jget<std::string>(cfg, "comm.task", "label_to_motion") == "prefix_completion"
                 ? CommTask::kPrefixCompletion
                 : CommTask::kLabelToMotion;
    c.prefix_frames = jget(cfg, "comm.prefix_frames", c.prefix_frames);
    return c;
}

void cmd_train_comm(RunContext& ctx) {
    PairDataset ds = load_pairs(jget<std::string>(ctx.cfg, "data.path", "pairs.bin"));
    DenoiserParams pa = load_prior(ctx.cfg, "comm.checkpoint_a", "prior.bin");
    std::string pb_path = jget<std::string>(ctx.cfg, "comm.checkpoint_b", "");
    DenoiserParams pb = pb_path.empty() ? pa : load_denoiser(pb_path);
    check_layout(pa, ds.layout, "train-comm");
    check_layout(pb, ds.layout, "train-comm");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));
    CommParams comm = init_comm(comm_config(ctx.cfg, pa.cfg), ctx.seed);
    auto log = train_commdm(pa, pb, comm, ds, sched, train_config(ctx.cfg), ctx.seed);
    save_comm(comm, ctx.emit(jget<std::string>(ctx.cfg, "comm.out_checkpoint", "comm.bin")));
    write_comm_loss_csv(log, ctx.emit("comm_loss.csv"));
}

void cmd_sample(RunContext& ctx) {
    Dataset ds = load_dataset(jget<std::string>(ctx.cfg, "sample.data", "dataset.bin"));
    DenoiserParams p = load_prior(ctx.cfg, "sample.checkpoint", "prior.bin");
    check_layout(p, ds.layout, "sample");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));
    SamplerConfig sc;
    sc.guidance = jget(ctx.cfg, "sample.guidance", 2.5);
    sc.seed = ctx.seed;
    int frames = jget(ctx.cfg, "sample.frames", 120);
    int count = jget(ctx.cfg, "sample.count", 1);
    std::optional<int> cond = cond_or_null(jget(ctx.cfg, "sample.cond", -1));
    for (int i = 0; i < count; ++i) {
        Motion m = sample(p, sched, cond, frames, sc, ds.stats, ds.layout, uint32_t(i));
        char name[48];
        std::snprintf(name, sizeof(name), "sample_%03d.json", i);
        save_motion(m, ctx.emit(name));
    }
}

void cmd_doubletake(RunContext& ctx) {
    Dataset ds = load_dataset(jget<std::string>(ctx.cfg, "doubletake.data", "dataset.bin"));
    DenoiserParams p = load_prior(ctx.cfg, "doubletake.checkpoint", "prior.bin");
    check_layout(p, ds.layout, "doubletake");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));

    std::vector<IntervalSpec> plan;
    json jplan = ctx.cfg.contains("doubletake") ? ctx.cfg["doubletake"].value("plan", json::array())
                                                : json::array();
    if (jplan.empty())
        jplan = json::array({{{"cond", 0}, {"frames", 120}},
                             {{"cond", 1}, {"frames", 120}},
                             {{"cond", 2}, {"frames", 120}}});
    for (const auto& iv : jplan)
        plan.push_back({iv.value("cond", 0), iv.value("frames", 120)});

    DoubleTakeConfig dt;
    dt.handshake = jget(ctx.cfg, "doubletake.handshake", dt.handshake);
    dt.ramp = jget(ctx.cfg, "doubletake.ramp", dt.ramp);
    dt.m_soft = jget(ctx.cfg, "doubletake.m_soft", dt.m_soft);
    dt.m_hard = jget(ctx.cfg, "doubletake.m_hard", dt.m_hard);
    dt.partial_steps = jget(ctx.cfg, "doubletake.partial_steps", dt.partial_steps);
    dt.context = jget(ctx.cfg, "doubletake.context", dt.context);
    dt.second_take = jget(ctx.cfg, "doubletake.second_take", dt.second_take);

    SamplerConfig sc;
    sc.guidance = jget(ctx.cfg, "doubletake.guidance", 2.5);
    sc.seed = ctx.seed;
    Motion m = double_take(p, sched, plan, dt, sc, ds.stats, ds.layout);
    save_motion(m, ctx.emit("doubletake.json"));
}

// Held features for one blend side: the task's channels taken from a raw-space
// source motion, normalized with the dataset stats.
struct HeldFeatures {
    ControlMask mask;
    Mat given;
};

std::optional<HeldFeatures> blend_side_control(const json& cfg, const std::string& side,
                                               const Dataset& ds, int frames) {
    std::string task = jget<std::string>(cfg, "blend.task_" + side, "");
    std::string source = jget<std::string>(cfg, "blend.source_" + side, "");
    if (task.empty() && source.empty()) return std::nullopt;
    if (task.empty() || source.empty())
        throw ValidationError("config fields 'blend.task_" + side + "' and 'blend.source_" + side +
                              "' must be given together");
    HeldFeatures h;
    h.mask = make_mask(ControlTask::parse(task), ds.layout);
    Motion src = normalize(load_motion(source), ds.stats);
    if (src.frame_count() < frames)
        throw ValidationError("blend source '" + source + "' is shorter than blend.frames");
    h.given = src.frames.topRows(frames);
    return h;
}

void cmd_blend(RunContext& ctx) {
    Dataset ds = load_dataset(jget<std::string>(ctx.cfg, "blend.data", "dataset.bin"));
    DenoiserParams pa = load_prior(ctx.cfg, "blend.checkpoint_a", "prior.bin");
    std::string pb_path = jget<std::string>(ctx.cfg, "blend.checkpoint_b", "");
    DenoiserParams pb = pb_path.empty() ? pa : load_denoiser(pb_path);
    check_layout(pa, ds.layout, "blend");
    check_layout(pb, ds.layout, "blend");
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));

    BlendConfig bc;
    bc.s = jget(ctx.cfg, "blend.s", 0.5);
    bc.frames = jget(ctx.cfg, "blend.frames", 120);
    bc.seed = ctx.seed;

    auto ha = blend_side_control(ctx.cfg, "a", ds, bc.frames);
    auto hb = blend_side_control(ctx.cfg, "b", ds, bc.frames);
    BlendModelSpec a{&pa, cond_or_null(jget(ctx.cfg, "blend.cond_a", -1)),
                     jget(ctx.cfg, "blend.guidance_a", 1.0), ha ? &ha->mask : nullptr,
                     ha ? &ha->given : nullptr};
    BlendModelSpec b{&pb, cond_or_null(jget(ctx.cfg, "blend.cond_b", -1)),
                     jget(ctx.cfg, "blend.guidance_b", 1.0), hb ? &hb->mask : nullptr,
                     hb ? &hb->given : nullptr};
    BlendResult r = blend_sample(a, b, sched, bc);

    Motion m;
    m.layout = ds.layout;
    m.frames = r.frames;
    m = denormalize(m, ds.stats);
    m.meta["seed"] = std::to_string(ctx.seed);
    m.meta["blend_s"] = std::to_string(bc.s);
    if (r.adherence_a) m.meta["adherence_a"] = std::to_string(*r.adherence_a);
    if (r.adherence_b) m.meta["adherence_b"] = std::to_string(*r.adherence_b);
    save_motion(m, ctx.emit("blend.json"));
}

void cmd_two_person(RunContext& ctx) {
    PairDataset ds = load_pairs(jget<std::string>(ctx.cfg, "two_person.data", "pairs.bin"));
    DenoiserParams pa = load_prior(ctx.cfg, "two_person.checkpoint_a", "prior.bin");
    std::string pb_path = jget<std::string>(ctx.cfg, "two_person.checkpoint_b", "");
    DenoiserParams pb = pb_path.empty() ? pa : load_denoiser(pb_path);
    check_layout(pa, ds.layout, "two-person");
    check_layout(pb, ds.layout, "two-person");
    CommParams comm = load_comm(jget<std::string>(ctx.cfg, "two_person.comm", "comm.bin"));
    NoiseSchedule sched = make_schedule(jget(ctx.cfg, "schedule.T", 100));

    TwoPersonSampleConfig tc;
    tc.frames = jget(ctx.cfg, "two_person.frames", 120);
    tc.guidance = jget(ctx.cfg, "two_person.guidance", 1.0);
    tc.seed = ctx.seed;
    tc.base_sample_index = uint32_t(jget(ctx.cfg, "two_person.base_sample_index", 0));
    tc.cond_a = cond_or_null(jget(ctx.cfg, "two_person.cond_a", -1));
    tc.cond_b = cond_or_null(jget(ctx.cfg, "two_person.cond_b", -1));

    Mat prefix_a, prefix_b;
    std::string psrc_a = jget<std::string>(ctx.cfg, "two_person.prefix_source_a", "");
    std::string psrc_b = jget<std::string>(ctx.cfg, "two_person.prefix_source_b", "");
    if (!psrc_a.empty() || !psrc_b.empty()) {
        int k = jget(ctx.cfg, "two_person.prefix_frames", 30);
        if (psrc_a.empty() || psrc_b.empty())
            throw ValidationError("config fields 'two_person.prefix_source_a/_b' must be given together");
        Motion ma = normalize(load_motion(psrc_a), ds.stats);
        Motion mb = normalize(load_motion(psrc_b), ds.stats);
        if (ma.frame_count() < k || mb.frame_count() < k)
            throw ValidationError("prefix sources are shorter than two_person.prefix_frames");
        prefix_a = ma.frames.topRows(k);
        prefix_b = mb.frames.topRows(k);
        tc.prefix_a = &prefix_a;
        tc.prefix_b = &prefix_b;
    }

    TwoPersonSample r = sample_two_person(pa, pb, comm, sched, ds, tc);
    auto stamp = [&](Motion& m, const PlanarPose& pose) {
        m.meta["pose_x"] = std::to_string(pose.x);
        m.meta["pose_z"] = std::to_string(pose.z);
        m.meta["pose_heading"] = std::to_string(pose.heading);
    };
    stamp(r.a, r.pose_a);
    stamp(r.b, r.pose_b);
    save_motion(r.a, ctx.emit("two_person_a.json"));
    save_motion(r.b, ctx.emit("two_person_b.json"));
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ';'))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

void cmd_eval(RunContext& ctx) {
    std::string kind = jget<std::string>(ctx.cfg, "eval.kind", "");
    if (kind.empty()) throw ValidationError("config field 'eval.kind' is required");
    MetricReport rep;
    rep.name = kind;
    rep.config_echo = ctx.cfg.dump();

    if (kind == "discontinuity") {
        Motion m = load_motion(jget<std::string>(ctx.cfg, "eval.motion", ""));
        std::vector<int> bounds;
        std::string raw = jget<std::string>(ctx.cfg, "eval.boundaries", "");
        if (!raw.empty()) {
            bounds = parse_int_list(raw);
        } else if (m.meta.count("interval_starts")) {
            bounds = parse_int_list(m.meta.at("interval_starts"));
            if (!bounds.empty() && bounds.front() == 0) bounds.erase(bounds.begin());
        }
        if (bounds.empty()) throw ValidationError("eval.boundaries is empty and the motion has none");
        auto stats = transition_discontinuity(m, bounds, jget(ctx.cfg, "eval.window", 5));
        Scalar mx = 0, mean = 0;
        for (const auto& st : stats) {
            mx = std::max(mx, st.max_jump);
            mean += st.mean_jump;
            rep.per_seed.push_back(st.mean_jump);
        }
        rep.values["max_jump"] = mx;
        rep.values["mean_jump"] = mean / Scalar(stats.size());
    } else if (kind == "adherence") {
        Motion m = load_motion(jget<std::string>(ctx.cfg, "eval.motion", ""));
        Motion target = load_motion(jget<std::string>(ctx.cfg, "eval.target", ""));
        ControlMask mask =
            make_mask(ControlTask::parse(jget<std::string>(ctx.cfg, "eval.task", "trajectory")),
                      m.layout);
        rep.values["adherence_rmse"] = control_adherence(m, mask, target.frames);
    } else if (kind == "prefix") {
        Motion pred = load_motion(jget<std::string>(ctx.cfg, "eval.motion", ""));
        Motion gt = load_motion(jget<std::string>(ctx.cfg, "eval.target", ""));
        int k = jget(ctx.cfg, "eval.prefix_frames", 30);
        for (const auto& row : prefix_l2(pred, gt, k)) {
            std::string tag = std::to_string(int(row.horizon_s)) + "s";
            rep.values["root_error_" + tag] = row.root_error;
            rep.values["joint_error_" + tag] = row.joint_error;
        }
    } else if (kind == "interaction") {
        Motion a = load_motion(jget<std::string>(ctx.cfg, "eval.motion", ""));
        Motion b = load_motion(jget<std::string>(ctx.cfg, "eval.motion_b", ""));
        auto pose_of = [](const Motion& m) {
            if (!m.meta.count("pose_x")) throw ValidationError("motion carries no pose metadata");
            return PlanarPose{std::stod(m.meta.at("pose_x")), std::stod(m.meta.at("pose_z")),
                              std::stod(m.meta.at("pose_heading"))};
        };
        std::string cls = jget<std::string>(ctx.cfg, "eval.pair_class", "approach");
        const auto classes = standard_pair_classes();
        const PairClassSpec* spec = nullptr;
        for (const auto& c : classes)
            if (c.name == cls) spec = &c;
        if (!spec) throw ValidationError("unknown pair class '" + cls + "'");
        rep.values["interaction_rmse"] = interaction_error(a, b, pose_of(a), pose_of(b), *spec);
    } else if (kind == "diversity") {
        std::vector<Motion> set;
        for (const auto& p : ctx.cfg.at("eval").value("motions", json::array()))
            set.push_back(load_motion(p.get<std::string>()));
        rep.values["diversity"] = diversity_proxy(set);
    } else if (kind == "foot_slide") {
        Motion m = load_motion(jget<std::string>(ctx.cfg, "eval.motion", ""));
        FootSlideStat st = foot_slide(m, jget(ctx.cfg, "eval.contact_threshold", 0.5));
        rep.values["mean_speed"] = st.mean_speed;
        rep.values["any_contact"] = st.any_contact ? 1.0 : 0.0;
    } else {
        throw ValidationError("unknown eval.kind '" + kind + "'");
    }

    write_report_json({rep}, ctx.emit("report.json"));
    write_report_csv({rep}, ctx.emit("report.csv"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prior-compose: diffusion motion priors and their compositions"};
    app.require_subcommand(1);
    app.fallthrough();
    app.allow_extras();

    std::string config_path, out_dir = ".";
    uint64_t seed = 0;
    int threads = 0;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed, "root seed (all randomness derives from it)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--threads", threads, "worker cap (PRIOR_COMPOSE_THREADS as fallback)");

    struct Cmd {
        const char* name;
        const char* help;
        void (*run)(RunContext&);
    };
    const Cmd cmds[] = {
        {"gen-data", "generate the synthetic dataset (or paired dataset)", cmd_gen_data},
        {"train", "train a diffusion prior on a dataset", cmd_train},
        {"finetune", "control fine-tuning with noise-masked control features", cmd_finetune},
        {"train-comm", "train the two-person communication block on frozen priors", cmd_train_comm},
        {"sample", "draw class-conditional samples from a prior", cmd_sample},
        {"doubletake", "long-form composition from an interval plan", cmd_doubletake},
        {"blend", "sample from a blend of two model predictions", cmd_blend},
        {"two-person", "sample a two-actor motion through the comm block", cmd_two_person},
        {"eval", "compute metrics on existing artifacts", cmd_eval},
    };
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->allow_extras();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    RunContext ctx;
    auto started = std::chrono::steady_clock::now();
    try {
        CLI::App* sub = app.get_subcommands().front();
        ctx.command = sub->get_name();
        ctx.cfg = load_config_file(config_path);
        std::vector<std::string> extras = app.remaining();
        for (const auto& e : sub->remaining()) extras.push_back(e);
        apply_overrides(ctx.cfg, extras);
        if (app.count("--seed") == 0) seed = jget<uint64_t>(ctx.cfg, "seed", seed);
        if (app.count("--out") == 0) out_dir = jget<std::string>(ctx.cfg, "out", out_dir);
        if (app.count("--threads") == 0) threads = jget(ctx.cfg, "threads", threads);
        ctx.seed = seed;
        ctx.out_dir = out_dir;
        ctx.threads = resolve_threads(threads);
        fs::create_directories(ctx.out_dir);

        for (const auto& c : cmds)
            if (ctx.command == c.name) c.run(ctx);

        double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_manifest(ctx, wall);
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << " (step " << e.step << ")\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
