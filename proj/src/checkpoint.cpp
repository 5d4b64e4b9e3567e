#include <cstdio>
#include <cstring>

#include "sage/gvae.hpp"

namespace sage {

namespace {

constexpr char kMagic[9] = "SAGEMDL1";

struct Writer {
    std::FILE* f;
    void u64(uint64_t v) { std::fwrite(&v, sizeof(v), 1, f); }
    void i32(int32_t v) { std::fwrite(&v, sizeof(v), 1, f); }
    void f64(double v) { std::fwrite(&v, sizeof(v), 1, f); }
    void str(const std::string& s) {
        u64(s.size());
        std::fwrite(s.data(), 1, s.size(), f);
    }
    void vec(const std::vector<double>& v) {
        u64(v.size());
        std::fwrite(v.data(), sizeof(double), v.size(), f);
    }
};

struct Reader {
    std::FILE* f;
    std::string path;
    void need(size_t got, size_t want) {
        check(got == want, "truncated checkpoint " + path);
    }
    uint64_t u64() {
        uint64_t v;
        need(std::fread(&v, sizeof(v), 1, f), 1);
        return v;
    }
    int32_t i32() {
        int32_t v;
        need(std::fread(&v, sizeof(v), 1, f), 1);
        return v;
    }
    double f64() {
        double v;
        need(std::fread(&v, sizeof(v), 1, f), 1);
        return v;
    }
    std::string str() {
        std::string s(u64(), '\0');
        if (!s.empty()) need(std::fread(s.data(), 1, s.size(), f), s.size());
        return s;
    }
    std::vector<double> vec() {
        std::vector<double> v(u64());
        if (!v.empty())
            need(std::fread(v.data(), sizeof(double), v.size(), f), v.size());
        return v;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const GvaeModel& model,
                     uint64_t run_config_hash, uint64_t seed) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    check(f != nullptr, "cannot open " + path + " for writing");
    Writer w{f};
    std::fwrite(kMagic, 1, 8, f);
    w.u64(model.graph_hash());
    w.u64(run_config_hash);
    w.u64(seed);
    w.str(model.topology.to_json_string());
    w.vec(model.layout.grids.latency_grid);
    w.vec(model.layout.grids.metric_grid);
    w.u64(model.layout.schema.server_metrics.size());
    for (const auto& s : model.layout.schema.server_metrics) w.str(s);
    w.u64(model.layout.schema.network_metrics.size());
    for (const auto& s : model.layout.schema.network_metrics) w.str(s);

    const TrainConfig& c = model.config;
    w.f64(c.alpha);
    w.f64(c.beta);
    w.f64(c.learning_rate);
    w.i32(c.batch_size);
    w.i32(c.epochs);
    w.f64(c.dropout);
    w.u64(c.seed);
    w.i32(c.latent_dim);
    w.i32(c.hidden_width);
    w.i32(c.teacher_forcing ? 1 : 0);
    w.f64(c.oversample_ratio);
    w.f64(c.mix_ratio);
    w.f64(c.adam_beta1);
    w.f64(c.adam_beta2);
    w.f64(c.adam_eps);

    w.f64(model.qos_target_us);
    w.f64(model.qos_percentile);

    w.i32(model.normalizer.fitted() ? 1 : 0);
    if (model.normalizer.fitted()) {
        w.vec(model.normalizer.center());
        w.vec(model.normalizer.scale());
    }

    w.u64(model.units.size());
    for (const auto& unit : model.units) {
        w.str(unit.spec.owner);
        w.vec(unit.encoder.params());
        w.vec(unit.encoder.running_mean());
        w.vec(unit.encoder.running_var());
        w.vec(unit.prior.params());
        w.vec(unit.prior.running_mean());
        w.vec(unit.prior.running_var());
        w.vec(unit.decoder.params());
        w.vec(unit.decoder.running_mean());
        w.vec(unit.decoder.running_var());
    }
    std::fclose(f);
}

GvaeModel load_checkpoint(const std::string& path, uint64_t* run_config_hash,
                          uint64_t* seed_out) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    check(f != nullptr, "cannot open checkpoint " + path);
    Reader r{f, path};
    char magic[8];
    r.need(std::fread(magic, 1, 8, f), 8);
    check(std::memcmp(magic, kMagic, 8) == 0, "bad checkpoint magic in " + path);

    uint64_t stored_hash = r.u64();
    uint64_t cfg_hash = r.u64();
    uint64_t seed = r.u64();
    if (run_config_hash) *run_config_hash = cfg_hash;
    if (seed_out) *seed_out = seed;

    RpcTopology topo = RpcTopology::from_json_string(r.str());
    PercentileGrid grids;
    grids.latency_grid = r.vec();
    grids.metric_grid = r.vec();
    MetricSchema schema;
    schema.server_metrics.clear();
    for (uint64_t i = 0, n = r.u64(); i < n; ++i)
        schema.server_metrics.push_back(r.str());
    schema.network_metrics.clear();
    for (uint64_t i = 0, n = r.u64(); i < n; ++i)
        schema.network_metrics.push_back(r.str());

    TrainConfig c;
    c.alpha = r.f64();
    c.beta = r.f64();
    c.learning_rate = r.f64();
    c.batch_size = r.i32();
    c.epochs = r.i32();
    c.dropout = r.f64();
    c.seed = r.u64();
    c.latent_dim = r.i32();
    c.hidden_width = r.i32();
    c.teacher_forcing = r.i32() != 0;
    c.oversample_ratio = r.f64();
    c.mix_ratio = r.f64();
    c.adam_beta1 = r.f64();
    c.adam_beta2 = r.f64();
    c.adam_eps = r.f64();

    double qos_target = r.f64();
    double qos_pct = r.f64();

    GvaeModel model = build_gvae(topo, grids, schema, c, qos_target, qos_pct);
    check(model.graph_hash() == stored_hash,
          "checkpoint graph hash mismatch: topology does not rebuild the stored CBN");

    if (r.i32() != 0) {
        auto center = r.vec();
        auto scale = r.vec();
        model.normalizer.set(std::move(center), std::move(scale));
    }

    uint64_t n_units = r.u64();
    check(n_units == model.units.size(), "checkpoint unit count mismatch");
    for (auto& unit : model.units) {
        std::string owner = r.str();
        check(owner == unit.spec.owner, "checkpoint unit order mismatch at " + owner);
        auto load_mlp = [&r](nn::Mlp& m) {
            auto p = r.vec();
            check(p.size() == m.params().size(), "checkpoint parameter size mismatch");
            m.params() = std::move(p);
            auto rm = r.vec();
            auto rv = r.vec();
            check(rm.size() == m.running_mean().size() &&
                      rv.size() == m.running_var().size(),
                  "checkpoint BN stat size mismatch");
            m.running_mean() = std::move(rm);
            m.running_var() = std::move(rv);
        };
        load_mlp(unit.encoder);
        load_mlp(unit.prior);
        load_mlp(unit.decoder);
    }
    std::fclose(f);
    return model;
}

}  // namespace sage
