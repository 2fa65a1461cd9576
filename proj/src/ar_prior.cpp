#include "qmerge/ar_prior.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>

namespace qmerge {

namespace {

constexpr std::size_t kHeadParams = 3;      // w_in, b_in, pos
constexpr std::size_t kParamsPerLayer = 8;  // wq, wk, wv, wo, w1, b1, w2, b2

std::size_t layer_base(std::size_t l) { return kHeadParams + l * kParamsPerLayer; }

Matrix random_matrix(std::size_t rows, std::size_t cols, double scale, RngState& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scale * rng.normal();
    return m;
}

}  // namespace

void PriorConfig::validate() const {
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0)
        throw Error(Errc::invalid_config, "model_dim must be a positive multiple of heads");
    if (context == 0) throw Error(Errc::invalid_config, "context must be >= 1");
    if (ffn_mult == 0) throw Error(Errc::invalid_config, "ffn_mult must be >= 1");
    if (!(learn_rate >= 0.0) || !std::isfinite(learn_rate)) throw Error(Errc::invalid_config, "learn_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::invalid_config, "momentum must lie in [0, 1)");
}

PriorModel::PriorModel(const PriorConfig& config, std::size_t token_dim, Direction direction)
    : config_(config), token_dim_(token_dim), direction_(direction) {
    config_.validate();
    if (token_dim == 0) throw Error(Errc::invalid_config, "token_dim must be >= 1");
    RngState rng = RngState(config_.seed).split(static_cast<std::uint64_t>(direction) + 1);
    const std::size_t m = config_.model_dim;
    const std::size_t f = m * config_.ffn_mult;
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
    const double m_scale = 1.0 / std::sqrt(static_cast<double>(m));
    const double f_scale = 1.0 / std::sqrt(static_cast<double>(f));
    // Residual branch outputs and the head start small so the unnormalized
    // residual stream stays O(1) at initialization.
    const double branch = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config_.layers, 1)));

    params_.push_back(random_matrix(token_dim, m, in_scale, rng));
    params_.emplace_back(1, m);
    params_.push_back(random_matrix(config_.context, m, 0.1, rng));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        for (int i = 0; i < 3; ++i) params_.push_back(random_matrix(m, m, m_scale, rng));
        params_.push_back(random_matrix(m, m, m_scale * branch, rng));
        params_.push_back(random_matrix(m, f, m_scale, rng));
        params_.emplace_back(1, f);
        params_.push_back(random_matrix(f, m, f_scale * branch, rng));
        params_.emplace_back(1, m);
    }
    params_.push_back(random_matrix(m, token_dim, 0.1 * m_scale, rng));
    params_.emplace_back(1, token_dim);
}

std::size_t PriorModel::parameter_count() const noexcept {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.size();
    return total;
}

void PriorModel::zero_output_head() {
    const std::size_t n = params_.size();
    params_[n - 2] = Matrix(config_.model_dim, token_dim_);
    params_[n - 1] = Matrix(1, token_dim_);
}

PriorModel PriorModel::with_direction(Direction direction) const {
    PriorModel copy = *this;
    copy.direction_ = direction;
    return copy;
}

std::vector<Var> PriorModel::bind(Tape& tape, bool requires_grad) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p, requires_grad));
    return vars;
}

Var PriorModel::forward(Tape& tape, const std::vector<Var>& params, const Matrix& seq) const {
    const std::size_t t = seq.rows();
    if (t == 0 || t > config_.context) throw Error(Errc::invalid_prefix, "sequence length must lie in [1, context]");
    if (seq.cols() != token_dim_) throw Error(Errc::invalid_shape, "sequence dim differs from model token dim");
    const std::size_t m = config_.model_dim;
    const std::size_t heads = config_.heads;
    const std::size_t head_dim = m / heads;
    const double inv_sqrt_head = 1.0 / std::sqrt(static_cast<double>(head_dim));

    const Var x = tape.constant(seq);
    Var h = tape.add_row(tape.matmul(x, params[0]), params[1]);
    h = tape.add(h, tape.slice_rows(params[2], 0, t));

    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::size_t b = layer_base(l);
        const Var q = tape.matmul(h, params[b + 0]);
        const Var k = tape.matmul(h, params[b + 1]);
        const Var v = tape.matmul(h, params[b + 2]);
        std::vector<Var> head_out;
        head_out.reserve(heads);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const Var qh = tape.slice_cols(q, hd * head_dim, head_dim);
            const Var kh = tape.slice_cols(k, hd * head_dim, head_dim);
            const Var vh = tape.slice_cols(v, hd * head_dim, head_dim);
            const Var weights = tape.causal_softmax(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_head));
            head_out.push_back(tape.matmul(weights, vh));
        }
        const Var attn = heads == 1 ? head_out.front() : tape.concat_cols(head_out);
        h = tape.add(h, tape.matmul(attn, params[b + 3]));
        const Var hidden = tape.gelu(tape.add_row(tape.matmul(h, params[b + 4]), params[b + 5]));
        h = tape.add(h, tape.add_row(tape.matmul(hidden, params[b + 6]), params[b + 7]));
    }

    const std::size_t n = params.size();
    Var out = tape.add_row(tape.matmul(h, params[n - 2]), params[n - 1]);
    if (config_.residual_input) out = tape.add(out, x);
    return out;
}

Matrix PriorModel::predict_all(const Matrix& seq) const {
    Tape tape;
    const auto vars = bind(tape, false);
    return tape.value(forward(tape, vars, seq));
}

std::vector<double> predict_next(const PriorModel& model, const Matrix& prefix) {
    if (prefix.rows() == 0) throw Error(Errc::invalid_prefix, "empty prefix");
    if (prefix.rows() > model.config().context) throw Error(Errc::invalid_prefix, "prefix exceeds model context");
    const Matrix out = model.predict_all(prefix);
    auto last = out.row(out.rows() - 1);
    return {last.begin(), last.end()};
}

Matrix reversed_rows(const Matrix& seq) {
    Matrix out(seq.rows(), seq.cols());
    for (std::size_t r = 0; r < seq.rows(); ++r) {
        auto src = seq.row(seq.rows() - 1 - r);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

namespace {

Matrix rows_range(const Matrix& seq, std::size_t begin, std::size_t count) {
    Matrix out(count, seq.cols());
    for (std::size_t r = 0; r < count; ++r) {
        auto src = seq.row(begin + r);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

/// Next-token regression loss of `seq` recorded on `tape`; invalid Var when K <= 1.
std::optional<Var> record_next_token_loss(const PriorModel& model, Tape& tape, const std::vector<Var>& params,
                                          const Matrix& seq) {
    const std::size_t k = seq.rows();
    if (k <= 1) return std::nullopt;
    const Var pred = model.forward(tape, params, rows_range(seq, 0, k - 1));
    return tape.sum_squared_error(pred, rows_range(seq, 1, k - 1));
}

const Matrix& oriented(const PriorModel& model, const Matrix& seq, Matrix& storage) {
    if (model.direction() == Direction::forward) return seq;
    storage = reversed_rows(seq);
    return storage;
}

}  // namespace

double loss_forward(const PriorModel& model, const Matrix& seq) {
    Tape tape;
    const auto vars = model.bind(tape, false);
    const auto loss = record_next_token_loss(model, tape, vars, seq);
    return loss ? tape.scalar(*loss) : 0.0;
}

double loss_backward(const PriorModel& model, const Matrix& seq) { return loss_forward(model, reversed_rows(seq)); }

double loss_ar(const PriorModel& fwd, const PriorModel& bwd, const Matrix& seq) {
    if (fwd.direction() != Direction::forward || bwd.direction() != Direction::backward)
        throw Error(Errc::invalid_direction, "loss_ar needs a forward and a backward model");
    const auto& a = fwd.config();
    const auto& b = bwd.config();
    if (a.layers != b.layers || a.model_dim != b.model_dim || a.heads != b.heads || a.context != b.context ||
        fwd.token_dim() != bwd.token_dim())
        throw Error(Errc::invalid_direction, "forward and backward models must share a config");
    return loss_forward(fwd, seq) + loss_backward(bwd, seq);
}

LossAndGrad directional_loss_and_grad(const PriorModel& model, const Matrix& seq) {
    Matrix storage;
    const Matrix& s = oriented(model, seq, storage);
    Tape tape;
    const auto vars = model.bind(tape, true);
    LossAndGrad out;
    const auto loss = record_next_token_loss(model, tape, vars, s);
    if (!loss) {
        for (const auto& p : model.parameters()) out.grads.emplace_back(p.rows(), p.cols());
        return out;
    }
    tape.backward(*loss);
    out.loss = tape.scalar(*loss);
    for (Var v : vars) out.grads.push_back(tape.grad(v));
    return out;
}

namespace {

double corpus_loss(const PriorModel& fwd, const PriorModel& bwd, const std::vector<Matrix>& corpus) {
    double total = 0.0;
    for (const auto& seq : corpus) total += loss_ar(fwd, bwd, seq);
    return total;
}

struct Optimizer {
    double rate;
    double momentum;
    std::vector<Matrix> velocity;

    void step(PriorModel& model, const std::vector<Matrix>& grads) {
        auto& params = model.parameters();
        if (velocity.empty())
            for (const auto& p : params) velocity.emplace_back(p.rows(), p.cols());
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i].data();
            auto g = grads[i].data();
            auto v = velocity[i].data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = momentum * v[j] + g[j];
                p[j] -= rate * v[j];
            }
        }
    }
};

void check_finite(double loss, std::size_t epoch) {
    if (!std::isfinite(loss))
        throw Error(Errc::diverged_training, "non-finite loss at epoch " + std::to_string(epoch));
}

void check_parameters(const PriorModel& model, std::size_t epoch) {
    for (const auto& p : model.parameters())
        for (double v : p.data())
            if (!std::isfinite(v))
                throw Error(Errc::diverged_training, "non-finite parameter at epoch " + std::to_string(epoch));
}

// Shapes are checked before training starts, so a shape error inside an
// epoch comes from an activation that overflowed to a non-finite value.
template <class F>
void guarded(std::size_t epoch, F&& step) {
    try {
        step();
    } catch (const Error& e) {
        if (e.code() != Errc::invalid_shape) throw;
        throw Error(Errc::diverged_training, "activation overflow at epoch " + std::to_string(epoch));
    }
}

}  // namespace

TrainingTrace train(PriorModel& fwd, PriorModel& bwd, const std::vector<Matrix>& corpus, const PriorConfig& cfg) {
    if (corpus.empty()) throw Error(Errc::invalid_config, "training corpus is empty");
    cfg.validate();
    for (const auto& seq : corpus) {
        if (seq.cols() != fwd.token_dim() || seq.cols() != bwd.token_dim())
            throw Error(Errc::invalid_shape, "corpus token dim differs from model token dim");
        if (seq.rows() == 0 || seq.rows() > fwd.config().context || seq.rows() > bwd.config().context)
            throw Error(Errc::invalid_prefix, "corpus sequence length must lie in [1, context]");
    }
    TrainingTrace trace;
    trace.loss.push_back(corpus_loss(fwd, bwd, corpus));
    check_finite(trace.loss.back(), 0);

    Optimizer opt_fwd{cfg.learn_rate, cfg.momentum, {}};
    Optimizer opt_bwd{cfg.learn_rate, cfg.momentum, {}};
    RngState order_rng = RngState(cfg.seed).split(0x5eed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(order_rng.next_u64() % i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t idx : order) {
            LossAndGrad gf, gb;
            guarded(epoch, [&] {
                gf = directional_loss_and_grad(fwd, corpus[idx]);
                gb = directional_loss_and_grad(bwd, corpus[idx]);
            });
            check_finite(gf.loss + gb.loss, epoch);
            opt_fwd.step(fwd, gf.grads);
            opt_bwd.step(bwd, gb.grads);
            check_parameters(fwd, epoch);
            check_parameters(bwd, epoch);
        }
        guarded(epoch, [&] { trace.loss.push_back(corpus_loss(fwd, bwd, corpus)); });
        check_finite(trace.loss.back(), epoch);
    }
    return trace;
}

double gradient_check(const PriorModel& model, const Matrix& seq, double h, std::size_t samples, std::uint64_t seed) {
    if (!(h >= 1e-6 && h <= 1e-4)) throw Error(Errc::invalid_config, "finite-difference step must lie in [1e-6, 1e-4]");
    const auto analytic = directional_loss_and_grad(model, seq);

    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t p = 0; p < model.parameters().size(); ++p)
        for (std::size_t j = 0; j < model.parameters()[p].size(); ++j) entries.emplace_back(p, j);
    RngState rng(seed);
    const std::size_t take = std::min(samples, entries.size());
    for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.next_u64() % (entries.size() - i));
        std::swap(entries[i], entries[j]);
    }

    auto directional = [](const PriorModel& m, const Matrix& s) {
        return m.direction() == Direction::forward ? loss_forward(m, s) : loss_backward(m, s);
    };

    double worst = 0.0;
    PriorModel probe = model;
    for (std::size_t i = 0; i < take; ++i) {
        const auto [p, j] = entries[i];
        double& theta = probe.parameters()[p].data()[j];
        const double saved = theta;
        theta = saved + h;
        const double up = directional(probe, seq);
        theta = saved - h;
        const double down = directional(probe, seq);
        theta = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double exact = analytic.grads[p].data()[j];
        const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-12});
        worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
    return worst;
}

DivergenceProbe lipschitz_divergence_probe(const PriorModel& model, const Matrix& full, const Matrix& merged_padded) {
    if (full.rows() != merged_padded.rows() || full.cols() != merged_padded.cols())
        throw Error(Errc::invalid_shape, "probe sequences must have equal shapes");
    if (full.rows() == 0) throw Error(Errc::invalid_prefix, "probe sequences are empty");
    // Causality makes row t of a full pass equal to f on the prefix ending at t.
    const Matrix out_full = model.predict_all(full);
    const Matrix out_merged = model.predict_all(merged_padded);
    DivergenceProbe probe;
    const std::size_t t = full.rows();
    for (std::size_t r = 0; r < t; ++r) {
        for (std::size_t c = 0; c < full.cols(); ++c) {
            const double dout = out_merged(r, c) - out_full(r, c);
            const double din = merged_padded(r, c) - full(r, c);
            probe.output_gap += dout * dout;
            probe.input_gap += din * din;
        }
    }
    probe.output_gap /= static_cast<double>(t);
    probe.input_gap /= static_cast<double>(t);
    if (probe.input_gap == 0.0) {
        probe.identical = true;
        probe.ratio = 0.0;
    } else {
        probe.ratio = probe.output_gap / probe.input_gap;
    }
    return probe;
}

namespace {

constexpr std::array<char, 8> kMagic = {'Q', 'M', 'P', 'R', 'I', 'O', 'R', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    std::array<char, sizeof(T)> bytes;
    if (!in.read(bytes.data(), sizeof(T))) throw Error(Errc::bad_checkpoint, "checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace

void save_checkpoint(const PriorModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_failure, "cannot open " + path.string() + " for writing");
    const auto& cfg = model.config();
    out.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(out, kCheckpointVersion);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.direction()));
    write_le<std::uint64_t>(out, cfg.layers);
    write_le<std::uint64_t>(out, cfg.model_dim);
    write_le<std::uint64_t>(out, cfg.heads);
    write_le<std::uint64_t>(out, cfg.context);
    write_le<std::uint64_t>(out, cfg.ffn_mult);
    write_le<std::uint64_t>(out, cfg.residual_input ? 1 : 0);
    write_le<std::uint64_t>(out, cfg.seed);
    write_le<double>(out, cfg.learn_rate);
    write_le<double>(out, cfg.momentum);
    write_le<std::uint64_t>(out, cfg.epochs);
    write_le<std::uint64_t>(out, model.token_dim());
    write_le<std::uint64_t>(out, model.parameters().size());
    for (const auto& p : model.parameters()) {
        write_le<std::uint64_t>(out, p.rows());
        write_le<std::uint64_t>(out, p.cols());
    }
    for (const auto& p : model.parameters())
        for (double v : p.data()) write_le<double>(out, v);
    if (!out) throw Error(Errc::io_failure, "write failed for " + path.string());
}

PriorModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic)
        throw Error(Errc::bad_checkpoint, path.string() + " is not a prior checkpoint");
    if (read_le<std::uint32_t>(in) != kCheckpointVersion) throw Error(Errc::bad_checkpoint, "unsupported checkpoint version");
    const auto direction = read_le<std::uint32_t>(in);
    if (direction > 1) throw Error(Errc::bad_checkpoint, "bad direction tag");
    PriorConfig cfg;
    cfg.layers = read_le<std::uint64_t>(in);
    cfg.model_dim = read_le<std::uint64_t>(in);
    cfg.heads = read_le<std::uint64_t>(in);
    cfg.context = read_le<std::uint64_t>(in);
    cfg.ffn_mult = read_le<std::uint64_t>(in);
    cfg.residual_input = read_le<std::uint64_t>(in) != 0;
    cfg.seed = read_le<std::uint64_t>(in);
    cfg.learn_rate = read_le<double>(in);
    cfg.momentum = read_le<double>(in);
    cfg.epochs = read_le<std::uint64_t>(in);
    const auto token_dim = read_le<std::uint64_t>(in);
    if (cfg.layers > 4096 || cfg.model_dim > (1u << 20) || cfg.context > (1u << 24))
        throw Error(Errc::bad_checkpoint, "implausible checkpoint config");
    PriorModel model(cfg, token_dim, static_cast<Direction>(direction));
    const auto count = read_le<std::uint64_t>(in);
    if (count != model.parameters().size()) throw Error(Errc::bad_checkpoint, "tensor count does not match config");
    for (auto& p : model.parameters()) {
        const auto rows = read_le<std::uint64_t>(in);
        const auto cols = read_le<std::uint64_t>(in);
        if (rows != p.rows() || cols != p.cols()) throw Error(Errc::bad_checkpoint, "tensor shape does not match config");
    }
    for (auto& p : model.parameters()) {
        std::vector<double> data(p.size());
        for (double& v : data) v = read_le<double>(in);
        p = Matrix(p.rows(), p.cols(), std::move(data));
    }
    return model;
}

}  // namespace qmerge
