#include "sage/gvae.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "sage/nn/kernels.hpp"

namespace sage {

namespace {

constexpr double kLogvarLo = -9.0;
constexpr double kLogvarHi = 9.0;

// Splits a raw [n, 2d] head into mu and clamped logvar; `inside` records
// where the clamp passes gradients through.
void split_head(const std::vector<double>& raw, int n, int d, std::vector<double>& mu,
                std::vector<double>& logvar, std::vector<uint8_t>& inside) {
    mu.resize(static_cast<size_t>(n) * d);
    logvar.resize(static_cast<size_t>(n) * d);
    inside.resize(static_cast<size_t>(n) * d);
    for (int r = 0; r < n; ++r) {
        const double* row = raw.data() + static_cast<size_t>(r) * 2 * d;
        for (int k = 0; k < d; ++k) {
            mu[static_cast<size_t>(r) * d + k] = row[k];
            double lv = row[d + k];
            bool in = lv > kLogvarLo && lv < kLogvarHi;
            inside[static_cast<size_t>(r) * d + k] = in;
            logvar[static_cast<size_t>(r) * d + k] =
                std::min(std::max(lv, kLogvarLo), kLogvarHi);
        }
    }
}

void merge_head_grads(const std::vector<double>& dmu, const std::vector<double>& dlogvar,
                      const std::vector<uint8_t>& inside, int n, int d,
                      std::vector<double>& draw) {
    draw.assign(static_cast<size_t>(n) * 2 * d, 0.0);
    for (int r = 0; r < n; ++r) {
        double* row = draw.data() + static_cast<size_t>(r) * 2 * d;
        for (int k = 0; k < d; ++k) {
            row[k] = dmu[static_cast<size_t>(r) * d + k];
            row[d + k] = inside[static_cast<size_t>(r) * d + k]
                             ? dlogvar[static_cast<size_t>(r) * d + k]
                             : 0.0;
        }
    }
}

int pick_layers(int in_dim) { return in_dim <= 32 ? 3 : 5; }

}  // namespace

uint64_t ServiceCvae::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const std::vector<double>& v) {
        h = fnv1a(v.data(), v.size() * sizeof(double), h);
    };
    mix(encoder.params());
    mix(prior.params());
    mix(decoder.params());
    mix(encoder.running_mean());
    mix(encoder.running_var());
    mix(prior.running_mean());
    mix(prior.running_var());
    mix(decoder.running_mean());
    mix(decoder.running_var());
    return h;
}

int GvaeModel::unit_index(const std::string& owner) const {
    for (size_t i = 0; i < units.size(); ++i)
        if (units[i].spec.owner == owner) return static_cast<int>(i);
    return -1;
}

double GvaeModel::frontend_tail_of(const std::vector<double>& row) const {
    return row[layout.offset[frontend_yc_node] + layout.qos_index];
}

GvaeModel build_gvae(const RpcTopology& topology, const PercentileGrid& grids,
                     const MetricSchema& schema, const TrainConfig& config,
                     double qos_target_us, double qos_percentile) {
    config.validate();
    GvaeModel m;
    m.topology = topology;
    m.graph = build_cbn(topology);
    m.layout = TensorLayout::build(m.graph, grids, schema, qos_percentile);
    m.config = config;
    m.qos_target_us = qos_target_us;
    m.qos_percentile = qos_percentile;
    m.frontend_yc_node = m.graph.require(NodeKind::LatClient, topology.frontend_rpc);
    m.unit_of_node.assign(m.graph.nodes().size(), -1);

    Rng rng(config.seed);

    auto add_unit = [&](UnitSpec spec) {
        if (spec.y_nodes.empty()) return;
        spec.latent_dim = config.latent_dim;
        spec.x_dim = m.layout.node_length(spec.x_node);
        spec.y_dim = 0;
        for (int id : spec.y_nodes) spec.y_dim += m.layout.node_length(id);
        spec.input_dim = 0;
        for (int id : spec.input_nodes) spec.input_dim += m.layout.node_length(id);

        ServiceCvae unit;
        unit.spec = spec;
        nn::MlpConfig enc;
        enc.in_dim = spec.x_dim + spec.y_dim;
        enc.out_dim = 2 * spec.latent_dim;
        enc.hidden = config.hidden_width;
        enc.layers = pick_layers(enc.in_dim);
        enc.dropout = config.dropout;
        unit.encoder = nn::Mlp(enc);

        nn::MlpConfig pri;
        pri.in_dim = spec.x_dim;
        pri.out_dim = 2 * spec.latent_dim;
        pri.hidden = config.hidden_width;
        pri.layers = pick_layers(pri.in_dim);
        pri.dropout = config.dropout;
        unit.prior = nn::Mlp(pri);

        nn::MlpConfig dec;
        dec.in_dim = spec.x_dim + spec.latent_dim + spec.input_dim;
        dec.out_dim = 2 * spec.y_dim;
        dec.hidden = config.hidden_width;
        dec.layers = pick_layers(dec.in_dim);
        dec.dropout = config.dropout;
        unit.decoder = nn::Mlp(dec);

        Rng unit_rng = rng.child("unit-init", fnv1a(spec.owner));
        unit.encoder.init_params(unit_rng);
        unit.prior.init_params(unit_rng);
        unit.decoder.init_params(unit_rng);

        int idx = static_cast<int>(m.units.size());
        for (int id : unit.spec.y_nodes) m.unit_of_node[id] = idx;
        m.unit_of_node[unit.spec.x_node] = idx;
        m.unit_of_node[unit.spec.z_node] = idx;
        m.units.push_back(std::move(unit));
    };

    // Service units: Y^s of served rpcs, Y^c of invoked rpcs; inputs are the
    // invoked rpcs' Y^s/Y^req/Y^resp (their children's Y^c are owned here).
    for (const auto& s : topology.services) {
        UnitSpec spec;
        spec.owner = s.name;
        spec.is_channel = false;
        spec.x_node = m.graph.require(NodeKind::MetricServer, s.name);
        spec.z_node = m.graph.require(NodeKind::LatentServer, s.name);
        for (const auto& r : topology.rpcs)
            if (r.server_service == s.name)
                spec.y_nodes.push_back(m.graph.require(NodeKind::LatServer, r.name));
        for (const auto& r : topology.rpcs) {
            if (r.client_service != s.name) continue;
            spec.y_nodes.push_back(m.graph.require(NodeKind::LatClient, r.name));
            std::string ch = RpcTopology::channel_name(r.name);
            spec.input_nodes.push_back(m.graph.require(NodeKind::LatServer, r.name));
            spec.input_nodes.push_back(m.graph.require(NodeKind::LatReq, ch));
            spec.input_nodes.push_back(m.graph.require(NodeKind::LatResp, ch));
        }
        add_unit(std::move(spec));
    }
    // Channel units: Y^req/Y^resp, plus the frontend Y^c when the client is
    // external (the load generator owns no unit).
    for (const auto& r : topology.rpcs) {
        std::string ch = RpcTopology::channel_name(r.name);
        UnitSpec spec;
        spec.owner = ch;
        spec.is_channel = true;
        spec.x_node = m.graph.require(NodeKind::MetricNetwork, ch);
        spec.z_node = m.graph.require(NodeKind::LatentNetwork, ch);
        spec.y_nodes.push_back(m.graph.require(NodeKind::LatReq, ch));
        spec.y_nodes.push_back(m.graph.require(NodeKind::LatResp, ch));
        if (topology.is_external_client(r)) {
            spec.y_nodes.push_back(m.graph.require(NodeKind::LatClient, r.name));
            spec.input_nodes.push_back(m.graph.require(NodeKind::LatServer, r.name));
        }
        add_unit(std::move(spec));
    }

    // Decoder cascade levels over the unit dependency DAG.
    size_t n_units = m.units.size();
    std::vector<std::vector<int>> unit_children(n_units);
    std::vector<int> indeg(n_units, 0);
    for (size_t u = 0; u < n_units; ++u) {
        for (int input : m.units[u].spec.input_nodes) {
            int w = m.unit_of_node[input];
            check(w >= 0, "decoder input node has no owning unit");
            unit_children[w].push_back(static_cast<int>(u));
            indeg[u]++;
        }
    }
    std::vector<int> level(n_units, 0);
    std::vector<int> ready;
    for (size_t u = 0; u < n_units; ++u)
        if (indeg[u] == 0) ready.push_back(static_cast<int>(u));
    size_t done = 0;
    while (!ready.empty()) {
        std::sort(ready.begin(), ready.end());
        m.unit_levels.push_back(ready);
        std::vector<int> next;
        for (int u : ready) {
            ++done;
            m.decoder_order.push_back(u);
            for (int c : unit_children[u]) {
                level[c] = std::max(level[c], level[u] + 1);
                if (--indeg[c] == 0) next.push_back(c);
            }
        }
        ready = std::move(next);
    }
    check(done == n_units, "decoder cascade has a cycle");

    return m;
}

NoiseDraws NoiseDraws::draw(const GvaeModel& model, const std::vector<int>& unit_rows,
                            const Rng& rng) {
    NoiseDraws nd;
    size_t n_units = model.units.size();
    nd.eps_cvae.resize(n_units);
    nd.eps_gsnn.resize(n_units);
    nd.mask_enc.resize(n_units);
    nd.mask_prior.resize(n_units);
    nd.mask_dec_cvae.resize(n_units);
    nd.mask_dec_gsnn.resize(n_units);
    for (size_t u = 0; u < n_units; ++u) {
        int n = unit_rows[u];
        if (n == 0) continue;
        const auto& spec = model.units[u].spec;
        int hid = model.config.hidden_width;
        Rng r = rng.child("noise", u);
        auto fill_normal = [&r](std::vector<double>& v, size_t count) {
            v.resize(count);
            for (auto& x : v) x = r.normal();
        };
        fill_normal(nd.eps_cvae[u], static_cast<size_t>(n) * spec.latent_dim);
        fill_normal(nd.eps_gsnn[u], static_cast<size_t>(n) * spec.latent_dim);
        if (model.config.dropout > 0.0) {
            auto fill_mask = [&r, &model](std::vector<double>& v, size_t count) {
                v.resize(count);
                for (auto& x : v) x = r.bernoulli(1.0 - model.config.dropout) ? 1.0 : 0.0;
            };
            fill_mask(nd.mask_enc[u], static_cast<size_t>(n) * hid);
            fill_mask(nd.mask_prior[u], static_cast<size_t>(n) * hid);
            fill_mask(nd.mask_dec_cvae[u], static_cast<size_t>(n) * hid);
            fill_mask(nd.mask_dec_gsnn[u], static_cast<size_t>(n) * hid);
        }
    }
    return nd;
}

namespace {

// Per-batch scratch for one unit.
struct UnitWork {
    std::vector<int> rows;             // usable global batch rows
    std::vector<int> local_of_global;  // global row -> local index or -1
    int n = 0;
    std::vector<double> X, Y;

    std::vector<double> enc_raw, prior_raw;
    std::vector<double> mu_q, logvar_q, mu_p, logvar_p;
    std::vector<uint8_t> in_q, in_p;
    std::vector<double> sigma_q, sigma_p;
    std::vector<double> z_cvae, z_gsnn;
    std::vector<double> dec_in_cvae, dec_in_gsnn;
    std::vector<double> dec_raw_cvae, dec_raw_gsnn;
    std::vector<double> mu_y_cvae, logvar_y_cvae, mu_y_gsnn, logvar_y_gsnn;
    std::vector<uint8_t> in_y_cvae, in_y_gsnn;
    std::vector<double> row_nll_cvae, row_nll_gsnn, row_kl;

    nn::Mlp::Cache enc_cache, prior_cache, dec_cache_cvae, dec_cache_gsnn;

    std::vector<double> d_mu_y_cvae, d_logvar_y_cvae, d_mu_y_gsnn, d_logvar_y_gsnn;
};

// Rows usable by each unit: the unit's own x/y nodes must be valid and every
// cascade input must come from a unit that can itself compute the row.
std::vector<std::vector<int>> unit_usable_rows(const GvaeModel& model, const Batch& batch) {
    size_t n_units = model.units.size();
    size_t B = batch.samples.size();
    std::vector<std::vector<bool>> usable(n_units, std::vector<bool>(B, false));
    for (int u : model.decoder_order) {
        const auto& spec = model.units[u].spec;
        for (size_t b = 0; b < B; ++b) {
            const SampleTensor& t = *batch.samples[b];
            bool ok = t.valid[spec.x_node];
            for (int id : spec.y_nodes) ok = ok && t.valid[id];
            for (int id : spec.input_nodes) {
                int w = model.unit_of_node[id];
                ok = ok && usable[w][b];
            }
            usable[u][b] = ok;
        }
    }
    std::vector<std::vector<int>> rows(n_units);
    for (size_t u = 0; u < n_units; ++u)
        for (size_t b = 0; b < B; ++b)
            if (usable[u][b]) rows[u].push_back(static_cast<int>(b));
    return rows;
}

void gather_unit_data(const GvaeModel& model, const Batch& batch,
                      const std::vector<std::vector<int>>& rows,
                      std::vector<UnitWork>& work) {
    size_t n_units = model.units.size();
    work.resize(n_units);
    for (size_t u = 0; u < n_units; ++u) {
        UnitWork& w = work[u];
        const auto& spec = model.units[u].spec;
        w.rows = rows[u];
        w.n = static_cast<int>(w.rows.size());
        w.local_of_global.assign(batch.samples.size(), -1);
        for (int i = 0; i < w.n; ++i) w.local_of_global[w.rows[i]] = i;
        if (w.n == 0) continue;
        w.X.resize(static_cast<size_t>(w.n) * spec.x_dim);
        w.Y.resize(static_cast<size_t>(w.n) * spec.y_dim);
        int x_off = model.layout.offset[spec.x_node];
        for (int i = 0; i < w.n; ++i) {
            const SampleTensor& t = *batch.samples[w.rows[i]];
            std::memcpy(&w.X[static_cast<size_t>(i) * spec.x_dim], &t.values[x_off],
                        sizeof(double) * spec.x_dim);
            int pos = 0;
            for (int id : spec.y_nodes) {
                int len = model.layout.length[id];
                std::memcpy(&w.Y[static_cast<size_t>(i) * spec.y_dim + pos],
                            &t.values[model.layout.offset[id]], sizeof(double) * len);
                pos += len;
            }
        }
    }
}

// Offset of a node inside the unit's concatenated y vector.
int y_slot_offset(const GvaeModel& model, int unit, int node) {
    int pos = 0;
    for (int id : model.units[unit].spec.y_nodes) {
        if (id == node) return pos;
        pos += model.layout.length[id];
    }
    fail("node %d is not owned by unit %d", node, unit);
}

}  // namespace

BatchLossResult gvae_batch_loss(GvaeModel& model, const Batch& batch,
                                const NoiseDraws& noise, bool compute_grads) {
    const TrainConfig& cfg = model.config;
    double alpha = cfg.alpha, beta = cfg.beta;
    size_t n_units = model.units.size();

    auto rows = unit_usable_rows(model, batch);
    std::vector<UnitWork> work;
    gather_unit_data(model, batch, rows, work);

    // Encoders and prior networks run independently per unit.
#pragma omp parallel for schedule(dynamic, 1)
    for (long u = 0; u < static_cast<long>(n_units); ++u) {
        UnitWork& w = work[u];
        if (w.n == 0) continue;
        ServiceCvae& unit = model.units[u];
        const auto& spec = unit.spec;
        int n = w.n, L = spec.latent_dim;

        std::vector<double> enc_in(static_cast<size_t>(n) * (spec.x_dim + spec.y_dim));
        for (int i = 0; i < n; ++i) {
            std::memcpy(&enc_in[static_cast<size_t>(i) * (spec.x_dim + spec.y_dim)],
                        &w.X[static_cast<size_t>(i) * spec.x_dim],
                        sizeof(double) * spec.x_dim);
            std::memcpy(&enc_in[static_cast<size_t>(i) * (spec.x_dim + spec.y_dim) +
                                spec.x_dim],
                        &w.Y[static_cast<size_t>(i) * spec.y_dim],
                        sizeof(double) * spec.y_dim);
        }
        w.enc_raw.resize(static_cast<size_t>(n) * 2 * L);
        const double* enc_mask =
            noise.mask_enc[u].empty() ? nullptr : noise.mask_enc[u].data();
        unit.encoder.forward(enc_in.data(), n, /*training=*/unit.trainable, enc_mask,
                             &w.enc_cache, w.enc_raw.data());
        split_head(w.enc_raw, n, L, w.mu_q, w.logvar_q, w.in_q);

        w.prior_raw.resize(static_cast<size_t>(n) * 2 * L);
        const double* pri_mask =
            noise.mask_prior[u].empty() ? nullptr : noise.mask_prior[u].data();
        unit.prior.forward(w.X.data(), n, /*training=*/unit.trainable, pri_mask,
                           &w.prior_cache, w.prior_raw.data());
        split_head(w.prior_raw, n, L, w.mu_p, w.logvar_p, w.in_p);

        w.sigma_q.resize(static_cast<size_t>(n) * L);
        w.sigma_p.resize(static_cast<size_t>(n) * L);
        w.z_cvae.resize(static_cast<size_t>(n) * L);
        w.z_gsnn.resize(static_cast<size_t>(n) * L);
        for (size_t k = 0; k < w.sigma_q.size(); ++k) {
            w.sigma_q[k] = std::exp(0.5 * w.logvar_q[k]);
            w.sigma_p[k] = std::exp(0.5 * w.logvar_p[k]);
            w.z_cvae[k] = w.mu_q[k] + w.sigma_q[k] * noise.eps_cvae[u][k];
            w.z_gsnn[k] = w.mu_p[k] + w.sigma_p[k] * noise.eps_gsnn[u][k];
        }
    }

    // Decoder cascade, level by level; inputs are the child decoders' means
    // (or the observed child values under teacher forcing).
    for (const auto& lvl : model.unit_levels) {
#pragma omp parallel for schedule(dynamic, 1)
        for (long li = 0; li < static_cast<long>(lvl.size()); ++li) {
            int u = lvl[li];
            UnitWork& w = work[u];
            if (w.n == 0) continue;
            ServiceCvae& unit = model.units[u];
            const auto& spec = unit.spec;
            int n = w.n, L = spec.latent_dim;
            int did = spec.x_dim + L + spec.input_dim;

            auto build_inputs = [&](bool cvae_path, std::vector<double>& dec_in,
                                    const std::vector<double>& z) {
                dec_in.assign(static_cast<size_t>(n) * did, 0.0);
                for (int i = 0; i < n; ++i) {
                    double* row = &dec_in[static_cast<size_t>(i) * did];
                    std::memcpy(row, &w.X[static_cast<size_t>(i) * spec.x_dim],
                                sizeof(double) * spec.x_dim);
                    std::memcpy(row + spec.x_dim, &z[static_cast<size_t>(i) * L],
                                sizeof(double) * L);
                    int pos = spec.x_dim + L;
                    for (int id : spec.input_nodes) {
                        int len = model.layout.length[id];
                        if (cfg.teacher_forcing) {
                            const SampleTensor& t = *batch.samples[w.rows[i]];
                            std::memcpy(row + pos, &t.values[model.layout.offset[id]],
                                        sizeof(double) * len);
                        } else {
                            int cu = model.unit_of_node[id];
                            const UnitWork& cw = work[cu];
                            int clocal = cw.local_of_global[w.rows[i]];
                            int coff = y_slot_offset(model, cu, id);
                            const auto& cmu = cvae_path ? cw.mu_y_cvae : cw.mu_y_gsnn;
                            std::memcpy(row + pos,
                                        &cmu[static_cast<size_t>(clocal) *
                                                 model.units[cu].spec.y_dim +
                                             coff],
                                        sizeof(double) * len);
                        }
                        pos += len;
                    }
                }
            };

            build_inputs(true, w.dec_in_cvae, w.z_cvae);
            w.dec_raw_cvae.resize(static_cast<size_t>(n) * 2 * spec.y_dim);
            const double* mask_c =
                noise.mask_dec_cvae[u].empty() ? nullptr : noise.mask_dec_cvae[u].data();
            unit.decoder.forward(w.dec_in_cvae.data(), n, unit.trainable, mask_c,
                                 &w.dec_cache_cvae, w.dec_raw_cvae.data());
            split_head(w.dec_raw_cvae, n, spec.y_dim, w.mu_y_cvae, w.logvar_y_cvae,
                       w.in_y_cvae);

            build_inputs(false, w.dec_in_gsnn, w.z_gsnn);
            w.dec_raw_gsnn.resize(static_cast<size_t>(n) * 2 * spec.y_dim);
            const double* mask_g =
                noise.mask_dec_gsnn[u].empty() ? nullptr : noise.mask_dec_gsnn[u].data();
            unit.decoder.forward(w.dec_in_gsnn.data(), n, unit.trainable, mask_g,
                                 &w.dec_cache_gsnn, w.dec_raw_gsnn.data());
            split_head(w.dec_raw_gsnn, n, spec.y_dim, w.mu_y_gsnn, w.logvar_y_gsnn,
                       w.in_y_gsnn);
        }
    }

    // Loss terms.
    BatchLossResult res;
    res.serial_levels = static_cast<int>(model.unit_levels.size());
    for (size_t u = 0; u < n_units; ++u) {
        UnitWork& w = work[u];
        if (w.n == 0) continue;
        const auto& spec = model.units[u].spec;
        int n = w.n;
        w.row_nll_cvae.resize(n);
        w.row_nll_gsnn.resize(n);
        w.row_kl.resize(n);
        kern::gaussian_nll_forward(w.Y.data(), w.mu_y_cvae.data(), w.logvar_y_cvae.data(),
                                   w.row_nll_cvae.data(), n, spec.y_dim);
        kern::gaussian_nll_forward(w.Y.data(), w.mu_y_gsnn.data(), w.logvar_y_gsnn.data(),
                                   w.row_nll_gsnn.data(), n, spec.y_dim);
        kern::kl_diag_forward(w.mu_q.data(), w.logvar_q.data(), w.mu_p.data(),
                              w.logvar_p.data(), w.row_kl.data(), n, spec.latent_dim);
        double nll_c = kern::ordered_sum(w.row_nll_cvae.data(), n) / n;
        double nll_g = kern::ordered_sum(w.row_nll_gsnn.data(), n) / n;
        double kl = kern::ordered_sum(w.row_kl.data(), n) / n;
        res.nll_cvae += nll_c;
        res.nll_gsnn += nll_g;
        res.kl += kl;
        res.total += alpha * (nll_c + beta * kl) + (1.0 - alpha) * nll_g;
    }
    if (!std::isfinite(res.total)) {
        fail("non-finite GVAE batch loss (nll_cvae=%g kl=%g nll_gsnn=%g); aborting batch",
             res.nll_cvae, res.kl, res.nll_gsnn);
    }
    if (!compute_grads) return res;

    // ---- backward ----
    // Initialize output-head gradients from the reconstruction losses.
    for (size_t u = 0; u < n_units; ++u) {
        UnitWork& w = work[u];
        if (w.n == 0) continue;
        const auto& spec = model.units[u].spec;
        int n = w.n;
        size_t ysz = static_cast<size_t>(n) * spec.y_dim;
        w.d_mu_y_cvae.assign(ysz, 0.0);
        w.d_logvar_y_cvae.assign(ysz, 0.0);
        w.d_mu_y_gsnn.assign(ysz, 0.0);
        w.d_logvar_y_gsnn.assign(ysz, 0.0);
        std::vector<double> row_grad(n, alpha / n);
        kern::gaussian_nll_backward(w.Y.data(), w.mu_y_cvae.data(), w.logvar_y_cvae.data(),
                                    row_grad.data(), w.d_mu_y_cvae.data(),
                                    w.d_logvar_y_cvae.data(), n, spec.y_dim);
        std::fill(row_grad.begin(), row_grad.end(), (1.0 - alpha) / n);
        kern::gaussian_nll_backward(w.Y.data(), w.mu_y_gsnn.data(), w.logvar_y_gsnn.data(),
                                    row_grad.data(), w.d_mu_y_gsnn.data(),
                                    w.d_logvar_y_gsnn.data(), n, spec.y_dim);
    }

    // Decoders in reverse cascade order; input gradients flow to the child
    // units' mean outputs. Frozen units are skipped: the trainable set is
    // closed under CBN descendants, so no gradient path through a frozen
    // unit reaches a trainable parameter.
    std::vector<std::vector<double>> dz_cvae(n_units), dz_gsnn(n_units);
    for (auto it = model.decoder_order.rbegin(); it != model.decoder_order.rend(); ++it) {
        int u = *it;
        UnitWork& w = work[u];
        if (w.n == 0) continue;
        ServiceCvae& unit = model.units[u];
        if (!unit.trainable) continue;
        const auto& spec = unit.spec;
        int n = w.n, L = spec.latent_dim;
        int did = spec.x_dim + L + spec.input_dim;

        auto run_path = [&](const std::vector<double>& d_mu,
                            const std::vector<double>& d_logvar,
                            const std::vector<uint8_t>& inside, nn::Mlp::Cache& cache,
                            bool cvae_path, std::vector<double>& dz) {
            std::vector<double> d_raw;
            merge_head_grads(d_mu, d_logvar, inside, n, spec.y_dim, d_raw);
            std::vector<double> d_in(static_cast<size_t>(n) * did);
            unit.decoder.backward(cache, d_raw.data(), d_in.data());
            dz.assign(static_cast<size_t>(n) * L, 0.0);
            for (int i = 0; i < n; ++i) {
                const double* row = &d_in[static_cast<size_t>(i) * did];
                for (int k = 0; k < L; ++k) dz[static_cast<size_t>(i) * L + k] = row[spec.x_dim + k];
                if (cfg.teacher_forcing) continue;
                int pos = spec.x_dim + L;
                for (int id : spec.input_nodes) {
                    int len = model.layout.length[id];
                    int cu = model.unit_of_node[id];
                    UnitWork& cw = work[cu];
                    int clocal = cw.local_of_global[w.rows[i]];
                    int coff = y_slot_offset(model, cu, id);
                    auto& cmu_grad = cvae_path ? cw.d_mu_y_cvae : cw.d_mu_y_gsnn;
                    for (int k = 0; k < len; ++k)
                        cmu_grad[static_cast<size_t>(clocal) * model.units[cu].spec.y_dim +
                                 coff + k] += row[pos + k];
                    pos += len;
                }
            }
        };
        run_path(w.d_mu_y_cvae, w.d_logvar_y_cvae, w.in_y_cvae, w.dec_cache_cvae, true,
                 dz_cvae[u]);
        run_path(w.d_mu_y_gsnn, w.d_logvar_y_gsnn, w.in_y_gsnn, w.dec_cache_gsnn, false,
                 dz_gsnn[u]);
    }

    // Reparameterization, KL, encoder and prior backward; independent per unit.
#pragma omp parallel for schedule(dynamic, 1)
    for (long u = 0; u < static_cast<long>(n_units); ++u) {
        UnitWork& w = work[u];
        ServiceCvae& unit = model.units[u];
        if (w.n == 0 || !unit.trainable) continue;
        const auto& spec = unit.spec;
        int n = w.n, L = spec.latent_dim;
        size_t zsz = static_cast<size_t>(n) * L;

        std::vector<double> d_mu_q(zsz, 0.0), d_logvar_q(zsz, 0.0);
        std::vector<double> d_mu_p(zsz, 0.0), d_logvar_p(zsz, 0.0);

        // z = mu + exp(logvar/2) * eps
        for (size_t k = 0; k < zsz; ++k) {
            double dc = dz_cvae[u].empty() ? 0.0 : dz_cvae[u][k];
            d_mu_q[k] += dc;
            d_logvar_q[k] += dc * noise.eps_cvae[u][k] * 0.5 * w.sigma_q[k];
            double dg = dz_gsnn[u].empty() ? 0.0 : dz_gsnn[u][k];
            d_mu_p[k] += dg;
            d_logvar_p[k] += dg * noise.eps_gsnn[u][k] * 0.5 * w.sigma_p[k];
        }

        std::vector<double> row_grad(n, alpha * beta / n);
        std::vector<double> kq_mu(zsz), kq_lv(zsz), kp_mu(zsz), kp_lv(zsz);
        kern::kl_diag_backward(w.mu_q.data(), w.logvar_q.data(), w.mu_p.data(),
                               w.logvar_p.data(), row_grad.data(), kq_mu.data(),
                               kq_lv.data(), kp_mu.data(), kp_lv.data(), n, L);
        for (size_t k = 0; k < zsz; ++k) {
            d_mu_q[k] += kq_mu[k];
            d_logvar_q[k] += kq_lv[k];
            d_mu_p[k] += kp_mu[k];
            d_logvar_p[k] += kp_lv[k];
        }

        std::vector<double> d_raw;
        merge_head_grads(d_mu_q, d_logvar_q, w.in_q, n, L, d_raw);
        unit.encoder.backward(w.enc_cache, d_raw.data(), nullptr);
        merge_head_grads(d_mu_p, d_logvar_p, w.in_p, n, L, d_raw);
        unit.prior.backward(w.prior_cache, d_raw.data(), nullptr);
    }

    return res;
}

double gvae_eval_loss(GvaeModel& model, const std::vector<SampleTensor>& tensors) {
    check(!tensors.empty(), "gvae_eval_loss on empty set");
    const TrainConfig& cfg = model.config;
    double total = 0.0;
    size_t chunk = 256;
    size_t n_chunks = 0;
    for (size_t begin = 0; begin < tensors.size(); begin += chunk, ++n_chunks) {
        Batch b;
        for (size_t i = begin; i < std::min(begin + chunk, tensors.size()); ++i)
            b.samples.push_back(&tensors[i]);

        auto rows = unit_usable_rows(model, b);
        std::vector<UnitWork> work;
        gather_unit_data(model, b, rows, work);

        // Deterministic: z at posterior/prior means, eval-mode nets.
        for (size_t u = 0; u < model.units.size(); ++u) {
            UnitWork& w = work[u];
            if (w.n == 0) continue;
            ServiceCvae& unit = model.units[u];
            const auto& spec = unit.spec;
            int n = w.n, L = spec.latent_dim;
            std::vector<double> enc_in(static_cast<size_t>(n) * (spec.x_dim + spec.y_dim));
            for (int i = 0; i < n; ++i) {
                std::memcpy(&enc_in[static_cast<size_t>(i) * (spec.x_dim + spec.y_dim)],
                            &w.X[static_cast<size_t>(i) * spec.x_dim],
                            sizeof(double) * spec.x_dim);
                std::memcpy(&enc_in[static_cast<size_t>(i) * (spec.x_dim + spec.y_dim) +
                                    spec.x_dim],
                            &w.Y[static_cast<size_t>(i) * spec.y_dim],
                            sizeof(double) * spec.y_dim);
            }
            w.enc_raw.resize(static_cast<size_t>(n) * 2 * L);
            unit.encoder.forward(enc_in.data(), n, false, nullptr, nullptr,
                                 w.enc_raw.data());
            split_head(w.enc_raw, n, L, w.mu_q, w.logvar_q, w.in_q);
            w.prior_raw.resize(static_cast<size_t>(n) * 2 * L);
            unit.prior.forward(w.X.data(), n, false, nullptr, nullptr, w.prior_raw.data());
            split_head(w.prior_raw, n, L, w.mu_p, w.logvar_p, w.in_p);
            w.z_cvae = w.mu_q;
            w.z_gsnn = w.mu_p;
        }
        for (const auto& lvl : model.unit_levels) {
            for (int u : lvl) {
                UnitWork& w = work[u];
                if (w.n == 0) continue;
                ServiceCvae& unit = model.units[u];
                const auto& spec = unit.spec;
                int n = w.n, L = spec.latent_dim;
                int did = spec.x_dim + L + spec.input_dim;
                auto build = [&](bool cvae_path, std::vector<double>& dec_in,
                                 const std::vector<double>& z) {
                    dec_in.assign(static_cast<size_t>(n) * did, 0.0);
                    for (int i = 0; i < n; ++i) {
                        double* row = &dec_in[static_cast<size_t>(i) * did];
                        std::memcpy(row, &w.X[static_cast<size_t>(i) * spec.x_dim],
                                    sizeof(double) * spec.x_dim);
                        std::memcpy(row + spec.x_dim, &z[static_cast<size_t>(i) * L],
                                    sizeof(double) * L);
                        int pos = spec.x_dim + L;
                        for (int id : spec.input_nodes) {
                            int len = model.layout.length[id];
                            int cu = model.unit_of_node[id];
                            const UnitWork& cw = work[cu];
                            int clocal = cw.local_of_global[w.rows[i]];
                            int coff = y_slot_offset(model, cu, id);
                            const auto& cmu = cvae_path ? cw.mu_y_cvae : cw.mu_y_gsnn;
                            std::memcpy(row + pos,
                                        &cmu[static_cast<size_t>(clocal) *
                                                 model.units[cu].spec.y_dim +
                                             coff],
                                        sizeof(double) * len);
                            pos += len;
                        }
                    }
                };
                build(true, w.dec_in_cvae, w.z_cvae);
                w.dec_raw_cvae.resize(static_cast<size_t>(n) * 2 * spec.y_dim);
                unit.decoder.forward(w.dec_in_cvae.data(), n, false, nullptr, nullptr,
                                     w.dec_raw_cvae.data());
                split_head(w.dec_raw_cvae, n, spec.y_dim, w.mu_y_cvae, w.logvar_y_cvae,
                           w.in_y_cvae);
                build(false, w.dec_in_gsnn, w.z_gsnn);
                w.dec_raw_gsnn.resize(static_cast<size_t>(n) * 2 * spec.y_dim);
                unit.decoder.forward(w.dec_in_gsnn.data(), n, false, nullptr, nullptr,
                                     w.dec_raw_gsnn.data());
                split_head(w.dec_raw_gsnn, n, spec.y_dim, w.mu_y_gsnn, w.logvar_y_gsnn,
                           w.in_y_gsnn);
            }
        }
        double chunk_loss = 0.0;
        for (size_t u = 0; u < model.units.size(); ++u) {
            UnitWork& w = work[u];
            if (w.n == 0) continue;
            const auto& spec = model.units[u].spec;
            int n = w.n;
            w.row_nll_cvae.resize(n);
            w.row_nll_gsnn.resize(n);
            w.row_kl.resize(n);
            kern::gaussian_nll_forward(w.Y.data(), w.mu_y_cvae.data(),
                                       w.logvar_y_cvae.data(), w.row_nll_cvae.data(), n,
                                       spec.y_dim);
            kern::gaussian_nll_forward(w.Y.data(), w.mu_y_gsnn.data(),
                                       w.logvar_y_gsnn.data(), w.row_nll_gsnn.data(), n,
                                       spec.y_dim);
            kern::kl_diag_forward(w.mu_q.data(), w.logvar_q.data(), w.mu_p.data(),
                                  w.logvar_p.data(), w.row_kl.data(), n, spec.latent_dim);
            chunk_loss +=
                cfg.alpha * (kern::ordered_sum(w.row_nll_cvae.data(), n) / n +
                             cfg.beta * kern::ordered_sum(w.row_kl.data(), n) / n) +
                (1.0 - cfg.alpha) * kern::ordered_sum(w.row_nll_gsnn.data(), n) / n;
        }
        total += chunk_loss;
    }
    return total / static_cast<double>(n_chunks);
}

LossTrace train_gvae(GvaeModel& model, const std::vector<SampleTensor>& new_pool,
                     const std::vector<SampleTensor>& old_pool,
                     const std::vector<SampleTensor>* validation, TrainHooks* hooks) {
    const TrainConfig& cfg = model.config;
    cfg.validate();
    check(!new_pool.empty(), "train_gvae: empty training pool");

    Rng root(cfg.seed);
    LossTrace trace;

    std::vector<std::array<nn::AdamState, 3>> opt(model.units.size());
    for (size_t u = 0; u < model.units.size(); ++u) {
        auto& unit = model.units[u];
        for (int k = 0; k < 3; ++k) {
            opt[u][k].beta1 = cfg.adam_beta1;
            opt[u][k].beta2 = cfg.adam_beta2;
            opt[u][k].eps = cfg.adam_eps;
        }
        opt[u][0].init(unit.encoder.params().size());
        opt[u][1].init(unit.prior.params().size());
        opt[u][2].init(unit.decoder.params().size());
    }

    double initial_loss = 0.0;
    int diverged_epochs = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        Rng erng = root.child("epoch", static_cast<uint64_t>(e));
        auto batches =
            interleave_batches(old_pool, new_pool, cfg.batch_size, cfg.mix_ratio, erng);
        double sum_total = 0, sum_nc = 0, sum_kl = 0, sum_ng = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            for (auto& unit : model.units) {
                unit.encoder.zero_grads();
                unit.prior.zero_grads();
                unit.decoder.zero_grads();
            }
            auto rows = unit_usable_rows(model, batches[bi]);
            std::vector<int> counts(model.units.size());
            for (size_t u = 0; u < rows.size(); ++u)
                counts[u] = static_cast<int>(rows[u].size());
            NoiseDraws noise =
                NoiseDraws::draw(model, counts, erng.child("batch", bi));
            BatchLossResult r = gvae_batch_loss(model, batches[bi], noise, true);
            for (size_t u = 0; u < model.units.size(); ++u) {
                auto& unit = model.units[u];
                if (!unit.trainable) continue;
                opt[u][0].step(unit.encoder.params(), unit.encoder.grads(),
                               cfg.learning_rate);
                opt[u][1].step(unit.prior.params(), unit.prior.grads(), cfg.learning_rate);
                opt[u][2].step(unit.decoder.params(), unit.decoder.grads(),
                               cfg.learning_rate);
            }
            trace.optimizer_steps++;
            sum_total += r.total;
            sum_nc += r.nll_cvae;
            sum_kl += r.kl;
            sum_ng += r.nll_gsnn;
            if (hooks && hooks->after_step) hooks->after_step(trace.optimizer_steps, model);
        }
        double nb = static_cast<double>(batches.size());
        trace.epoch_total.push_back(sum_total / nb);
        trace.epoch_nll_cvae.push_back(sum_nc / nb);
        trace.epoch_kl.push_back(sum_kl / nb);
        trace.epoch_nll_gsnn.push_back(sum_ng / nb);
        if (validation && !validation->empty())
            trace.val_loss.push_back(gvae_eval_loss(model, *validation));

        if (e == 0) initial_loss = trace.epoch_total[0];
        double bound = std::abs(initial_loss) * 10.0 + 1.0;
        if (trace.epoch_total.back() > bound) {
            if (++diverged_epochs >= 3)
                fail("training diverged: epoch %d loss %.3g exceeds 10x initial %.3g",
                     e, trace.epoch_total.back(), initial_loss);
        } else {
            diverged_epochs = 0;
        }
    }
    return trace;
}

LossTrace train_gvae_simple(GvaeModel& model, const std::vector<SampleTensor>& tensors,
                            const std::vector<SampleTensor>* validation) {
    Rng rng(model.config.seed);
    auto pool = oversample(tensors, model.config.oversample_ratio, rng);
    return train_gvae(model, pool, {}, validation, nullptr);
}

std::vector<std::vector<double>> gvae_generate(GvaeModel& model,
                                               const GenerateOptions& opts,
                                               const Rng& rng) {
    check(opts.values != nullptr, "gvae_generate needs a full-layout value vector");
    check(static_cast<int>(opts.values->size()) == model.layout.total,
          "value vector does not match the tensor layout (missing metric nodes?)");
    const std::vector<double>& base = *opts.values;
    for (int id : model.graph.metric_node_ids()) {
        int off = model.layout.offset[id], len = model.layout.length[id];
        for (int k = 0; k < len; ++k)
            check(std::isfinite(base[off + k]), "non-finite metric value for node " +
                                                    model.graph.node(id).owner);
    }
    int D = opts.n_draws;
    if (D == 0) return {};
    check(D > 0, "n_draws must be nonnegative");

    std::vector<bool> regen = opts.regenerate;
    if (regen.empty()) regen.assign(model.graph.nodes().size(), true);

    std::vector<std::vector<double>> out(D, base);

    size_t n_units = model.units.size();
    // Latent draws per unit.
    std::vector<std::vector<double>> z(n_units);
    for (size_t u = 0; u < n_units; ++u) {
        ServiceCvae& unit = model.units[u];
        const auto& spec = unit.spec;
        int L = spec.latent_dim;
        std::vector<double> head(2 * L);
        bool abduct = u < opts.abduct.size() && opts.abduct[u];
        if (abduct) {
            std::vector<double> enc_in(spec.x_dim + spec.y_dim);
            std::memcpy(enc_in.data(), &base[model.layout.offset[spec.x_node]],
                        sizeof(double) * spec.x_dim);
            int pos = spec.x_dim;
            for (int id : spec.y_nodes) {
                int len = model.layout.length[id];
                std::memcpy(enc_in.data() + pos, &base[model.layout.offset[id]],
                            sizeof(double) * len);
                pos += len;
            }
            unit.encoder.forward_eval(enc_in.data(), 1, head.data());
        } else {
            unit.prior.forward_eval(&base[model.layout.offset[spec.x_node]], 1,
                                    head.data());
        }
        Rng zr = rng.child("z", u);
        z[u].resize(static_cast<size_t>(D) * L);
        for (int d = 0; d < D; ++d) {
            for (int k = 0; k < L; ++k) {
                double lv = std::min(std::max(head[L + k], kLogvarLo), kLogvarHi);
                z[u][static_cast<size_t>(d) * L + k] =
                    head[k] + std::exp(0.5 * lv) * zr.normal();
            }
        }
    }

    // Decoder cascade; inputs read from the per-draw merged assignment, so
    // clamped nodes feed observed values downstream.
    for (const auto& lvl : model.unit_levels) {
        for (int u : lvl) {
            ServiceCvae& unit = model.units[u];
            const auto& spec = unit.spec;
            bool any = false;
            for (int id : spec.y_nodes) any = any || regen[id];
            if (!any) continue;
            int L = spec.latent_dim;
            int did = spec.x_dim + L + spec.input_dim;
            std::vector<double> dec_in(static_cast<size_t>(D) * did);
            for (int d = 0; d < D; ++d) {
                double* row = &dec_in[static_cast<size_t>(d) * did];
                std::memcpy(row, &base[model.layout.offset[spec.x_node]],
                            sizeof(double) * spec.x_dim);
                std::memcpy(row + spec.x_dim, &z[u][static_cast<size_t>(d) * L],
                            sizeof(double) * L);
                int pos = spec.x_dim + L;
                for (int id : spec.input_nodes) {
                    int len = model.layout.length[id];
                    std::memcpy(row + pos, &out[d][model.layout.offset[id]],
                                sizeof(double) * len);
                    pos += len;
                }
            }
            std::vector<double> raw(static_cast<size_t>(D) * 2 * spec.y_dim);
            unit.decoder.forward_eval(dec_in.data(), D, raw.data());
            for (int d = 0; d < D; ++d) {
                int pos = 0;
                for (int id : spec.y_nodes) {
                    int len = model.layout.length[id];
                    if (regen[id]) {
                        std::memcpy(&out[d][model.layout.offset[id]],
                                    &raw[static_cast<size_t>(d) * 2 * spec.y_dim + pos],
                                    sizeof(double) * len);
                    }
                    pos += len;
                }
            }
        }
    }
    return out;
}

FitReport reconstruct_metrics(GvaeModel& model, const std::vector<SampleTensor>& test,
                              int n_draws, const Rng& rng) {
    check(!test.empty(), "reconstruct_metrics on empty test set");
    int fe = model.frontend_yc_node;
    int off = model.layout.offset[fe], len = model.layout.length[fe];

    std::vector<std::vector<double>> preds, obs;
    for (size_t i = 0; i < test.size(); ++i) {
        GenerateOptions opts;
        opts.n_draws = n_draws;
        opts.values = &test[i].values;
        auto rows = gvae_generate(model, opts, rng.child("window", i));
        std::vector<double> mean(len, 0.0);
        for (const auto& r : rows)
            for (int k = 0; k < len; ++k) mean[k] += r[off + k];
        for (int k = 0; k < len; ++k)
            mean[k] = model.normalizer.invert_one(off + k, mean[k] / n_draws);
        std::vector<double> o(len);
        for (int k = 0; k < len; ++k)
            o[k] = model.normalizer.invert_one(off + k, test[i].values[off + k]);
        preds.push_back(std::move(mean));
        obs.push_back(std::move(o));
    }

    // R^2 pooled over grid points about per-point test means.
    double ss_res = 0, ss_tot = 0, se = 0;
    size_t n = obs.size();
    for (int k = 0; k < len; ++k) {
        double mean_obs = 0;
        for (size_t i = 0; i < n; ++i) mean_obs += obs[i][k];
        mean_obs /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            double r = obs[i][k] - preds[i][k];
            ss_res += r * r;
            double t = obs[i][k] - mean_obs;
            ss_tot += t * t;
            se += r * r;
        }
    }
    FitReport rep;
    rep.n_windows = n;
    rep.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    rep.rmse_us = std::sqrt(se / (static_cast<double>(n) * len));
    return rep;
}

double kl_diag_gaussians(const std::vector<double>& mu_q,
                         const std::vector<double>& logvar_q,
                         const std::vector<double>& mu_p,
                         const std::vector<double>& logvar_p) {
    check(mu_q.size() == logvar_q.size() && mu_q.size() == mu_p.size() &&
              mu_q.size() == logvar_p.size(),
          "KL input size mismatch");
    double row = 0;
    kern::kl_diag_forward(mu_q.data(), logvar_q.data(), mu_p.data(), logvar_p.data(),
                          &row, 1, static_cast<int>(mu_q.size()));
    return row;
}

}  // namespace sage
