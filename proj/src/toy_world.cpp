#include "dpopt/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dpopt::toy {

namespace {

using ad::Tensor;

struct Rgb {
    double r, g, b;
};

enum class ShapeKind { Square, Circle, Cross, Stripe };

const std::unordered_map<std::string, Rgb>& color_table() {
    static const std::unordered_map<std::string, Rgb> table = {
        {"red", {1, -1, -1}},    {"green", {-1, 1, -1}},  {"blue", {-1, -1, 1}},
        {"yellow", {1, 1, -1}},  {"purple", {1, -1, 1}},  {"orange", {1, 0, -1}},
        {"white", {1, 1, 1}},    {"black", {-0.5, -0.5, -0.5}},
        {"crimson", {1, -1, -1}},  // renders as red
        {"emerald", {-1, 1, -1}},  // renders as green
    };
    return table;
}

const std::unordered_map<std::string, ShapeKind>& shape_table() {
    static const std::unordered_map<std::string, ShapeKind> table = {
        {"square", ShapeKind::Square}, {"circle", ShapeKind::Circle},
        {"cross", ShapeKind::Cross},   {"stripe", ShapeKind::Stripe},
        {"box", ShapeKind::Square},    {"disc", ShapeKind::Circle},
    };
    return table;
}

const std::unordered_map<std::string, int>& size_table() {
    static const std::unordered_map<std::string, int> table = {
        {"large", 10}, {"big", 10}, {"huge", 10}, {"small", 4}, {"tiny", 4},
    };
    return table;
}

const std::unordered_map<std::string, std::pair<double, double>>& position_table() {
    static const std::unordered_map<std::string, std::pair<double, double>> table = {
        {"center", {8, 8}}, {"top", {4, 8}}, {"bottom", {12, 8}}, {"left", {8, 4}}, {"right", {8, 12}},
    };
    return table;
}

const std::unordered_map<std::string, double>& intensity_table() {
    static const std::unordered_map<std::string, double> table = {{"bright", 1.0}, {"pale", 0.5}};
    return table;
}

Tensor randn_tensor(ad::Shape shape, rng::Stream& rs, double sd = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(ad::numel_of(shape)));
    for (auto& x : v) x = sd * rs.normal();
    return Tensor::from_vector(std::move(shape), std::move(v));
}

}  // namespace

Vocabulary Vocabulary::standard(std::uint64_t embed_seed) {
    Vocabulary v;
    v.tokens = {
        kEmpty,
        // colors
        "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
        // color synonyms
        "crimson", "emerald",
        // shapes
        "square", "circle", "cross", "stripe",
        // shape synonyms
        "box", "disc",
        // sizes and synonyms
        "large", "small", "big", "huge", "tiny",
        // positions
        "top", "bottom", "left", "right", "center",
        // intensity modifiers
        "bright", "pale",
        // fillers
        "a", "the", "very", "quite", "one", "lone", "scene", "view", "nice", "plain", "of", "on",
    };
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) v.index[v.tokens[i]] = i;

    rng::Stream rs(rng::derive_seed(embed_seed, "embedding-init"));
    v.embedding_table = randn_tensor({v.size(), kEmbedDim}, rs, 1.0 / std::sqrt(kEmbedDim));
    return v;
}

int Vocabulary::id(const std::string& w) const {
    auto it = index.find(w);
    if (it == index.end()) throw std::invalid_argument("vocabulary: unknown token '" + w + "'");
    return it->second;
}

std::uint64_t Vocabulary::hash() const {
    std::string joined;
    for (const auto& t : tokens) {
        joined += t;
        joined += '\n';
    }
    return rng::fnv1a(joined);
}

Tensor render_scene(const TokenList& prompt, const Vocabulary& vocab) {
    Rgb color{0, 0, 0};  // gray fallback
    ShapeKind shape = ShapeKind::Square;
    int size_px = 4;
    double cy = 8, cx = 8;
    double intensity = 1.0;
    bool content = false;

    for (const auto& tok : prompt) {
        vocab.id(tok);  // hard error for out-of-vocabulary tokens
        if (auto it = color_table().find(tok); it != color_table().end()) {
            color = it->second;
            content = true;
        } else if (auto is = shape_table().find(tok); is != shape_table().end()) {
            shape = is->second;
            content = true;
        } else if (auto iz = size_table().find(tok); iz != size_table().end()) {
            size_px = iz->second;
            content = true;
        } else if (auto ip = position_table().find(tok); ip != position_table().end()) {
            cy = ip->second.first;
            cx = ip->second.second;
            content = true;
        } else if (auto ii = intensity_table().find(tok); ii != intensity_table().end()) {
            intensity = ii->second;
            content = true;
        }
        // fillers and EMPTY render nothing
    }

    std::vector<double> px(static_cast<std::size_t>(kImagePixels), -1.0);
    if (content) {
        const double half = size_px / 2.0;
        const double thick = std::max(0.5, size_px / 6.0);
        const double band = std::max(1.0, size_px / 4.0);
        for (int r = 0; r < kImageSize; ++r) {
            for (int c = 0; c < kImageSize; ++c) {
                const double fr = (r + 0.5) - cy;
                const double fc = (c + 0.5) - cx;
                bool in = false;
                switch (shape) {
                    case ShapeKind::Square: in = std::abs(fr) <= half && std::abs(fc) <= half; break;
                    case ShapeKind::Circle: in = fr * fr + fc * fc <= half * half; break;
                    case ShapeKind::Cross:
                        in = (std::abs(fc) <= thick && std::abs(fr) <= half) ||
                             (std::abs(fr) <= thick && std::abs(fc) <= half);
                        break;
                    case ShapeKind::Stripe: in = std::abs(fr) <= band; break;
                }
                if (!in) continue;
                const int idx = r * kImageSize + c;
                px[0 * kImageSize * kImageSize + idx] = color.r * intensity;
                px[1 * kImageSize * kImageSize + idx] = color.g * intensity;
                px[2 * kImageSize * kImageSize + idx] = color.b * intensity;
            }
        }
    }
    return Tensor::from_vector({3, kImageSize, kImageSize}, std::move(px));
}

Tensor text_encode(const std::vector<Tensor>& soft_rows, const Vocabulary& vocab) {
    if (static_cast<int>(soft_rows.size()) > kPromptSlots)
        throw std::invalid_argument("text_encode: more than " + std::to_string(kPromptSlots) + " slots");
    const int v_size = vocab.size();
    for (const auto& row : soft_rows) {
        if (row.rank() != 1 || row.shape[0] != v_size)
            throw std::invalid_argument("text_encode: slot row must have shape [" +
                                        std::to_string(v_size) + "]");
        double s = 0.0;
        for (double x : row.values()) s += x;
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("text_encode: slot row sums to " + std::to_string(s) +
                                        ", expected 1");
    }

    Tensor empty_row = Tensor::zeros({v_size});
    (*empty_row.data)[0] = 1.0;
    Tensor acc = ad::scale(ad::matmul(empty_row, vocab.embedding_table),
                           static_cast<double>(kPromptSlots - soft_rows.size()));
    for (const auto& row : soft_rows) acc = ad::add(acc, ad::matmul(row, vocab.embedding_table));
    return ad::scale(acc, 1.0 / kPromptSlots);
}

Tensor text_encode(const TokenList& prompt, const Vocabulary& vocab) {
    std::vector<Tensor> rows;
    rows.reserve(prompt.size());
    for (const auto& tok : prompt) {
        Tensor row = Tensor::zeros({vocab.size()});
        (*row.data)[static_cast<std::size_t>(vocab.id(tok))] = 1.0;
        rows.push_back(std::move(row));
    }
    return text_encode(rows, vocab);
}

DenoiserWeights DenoiserWeights::init(std::uint64_t seed) {
    rng::Stream rs(rng::derive_seed(seed, "denoiser-init"));
    const int in_dim = kImagePixels + kTimeFeatDim + kEmbedDim;
    DenoiserWeights w;
    w.w1 = randn_tensor({in_dim, kHiddenDim}, rs, std::sqrt(2.0 / in_dim));
    w.b1 = Tensor::zeros({kHiddenDim});
    w.w2 = randn_tensor({kHiddenDim, kHiddenDim}, rs, std::sqrt(2.0 / kHiddenDim));
    w.b2 = Tensor::zeros({kHiddenDim});
    w.w3 = randn_tensor({kHiddenDim, kImagePixels}, rs, std::sqrt(2.0 / kHiddenDim));
    w.b3 = Tensor::zeros({kImagePixels});
    return w;
}

DenoiserWeights DenoiserWeights::zeros() {
    const int in_dim = kImagePixels + kTimeFeatDim + kEmbedDim;
    DenoiserWeights w;
    w.w1 = Tensor::zeros({in_dim, kHiddenDim});
    w.b1 = Tensor::zeros({kHiddenDim});
    w.w2 = Tensor::zeros({kHiddenDim, kHiddenDim});
    w.b2 = Tensor::zeros({kHiddenDim});
    w.w3 = Tensor::zeros({kHiddenDim, kImagePixels});
    w.b3 = Tensor::zeros({kImagePixels});
    return w;
}

Tensor time_features(int t) {
    std::vector<double> f(kTimeFeatDim);
    for (int i = 0; i < kTimeFeatDim / 2; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / (kTimeFeatDim / 2));
        f[2 * i] = std::sin(t * freq);
        f[2 * i + 1] = std::cos(t * freq);
    }
    return Tensor::from_vector({kTimeFeatDim}, std::move(f));
}

Tensor denoiser_forward(const Tensor& x_t, int t, const Tensor& cond, const DenoiserWeights& w) {
    if (cond.rank() != 1 || cond.shape[0] != kEmbedDim)
        throw std::invalid_argument("denoiser_forward: cond must have shape [" +
                                    std::to_string(kEmbedDim) + "]");
    std::vector<Tensor> parts{ad::reshape(x_t, {static_cast<int>(x_t.numel())}), time_features(t), cond};
    auto in = ad::concat(parts);
    auto h1 = ad::silu(ad::add(ad::matmul(in, w.w1), w.b1));
    auto h2 = ad::silu(ad::add(ad::matmul(h1, w.w2), w.b2));
    auto out = ad::reshape(ad::add(ad::matmul(h2, w.w3), w.b3), x_t.shape);
    if (out.requires_grad && ad::Tape::current() != nullptr)
        ad::Tape::current()->denoiser_forwards += 1;
    return out;
}

diffusion::DenoiserFn ToyModel::denoiser(CallCounters* counters) const {
    DenoiserWeights w = weights;
    return [w, counters](const Tensor& x, int t, const Tensor& cond) {
        auto out = denoiser_forward(x, t, cond, w);
        if (counters != nullptr) {
            counters->total_forwards += 1;
            if (out.requires_grad) counters->grad_forwards += 1;
        }
        return out;
    };
}

TokenList sample_scene_prompt(rng::Stream& rs, const Vocabulary& vocab) {
    (void)vocab;
    static const std::vector<std::string> colors = {"red",    "green",  "blue",  "yellow",
                                                    "purple", "orange", "white", "black"};
    static const std::unordered_map<std::string, std::vector<std::string>> color_syn = {
        {"red", {"crimson"}}, {"green", {"emerald"}}};
    static const std::vector<std::string> shapes = {"square", "circle", "cross", "stripe"};
    static const std::unordered_map<std::string, std::vector<std::string>> shape_syn = {
        {"square", {"box"}}, {"circle", {"disc"}}};
    static const std::vector<std::string> sizes = {"large", "small"};
    static const std::unordered_map<std::string, std::vector<std::string>> size_syn = {
        {"large", {"big", "huge"}}, {"small", {"tiny"}}};
    static const std::vector<std::string> positions = {"top", "bottom", "left", "right", "center"};
    static const std::vector<std::string> intensities = {"bright", "pale"};
    static const std::vector<std::string> fillers = {"a",    "the",  "very", "quite", "one",  "lone",
                                                     "scene", "view", "nice", "plain", "of",   "on"};

    auto maybe_synonym = [&](const std::string& w,
                             const std::unordered_map<std::string, std::vector<std::string>>& syn) {
        auto it = syn.find(w);
        if (it != syn.end() && rs.uniform() < 0.15)
            return it->second[rs.below(it->second.size())];
        return w;
    };

    TokenList p;
    if (rs.uniform() < 0.4) p.push_back(fillers[rs.below(fillers.size())]);
    if (rs.uniform() < 0.6) p.push_back(maybe_synonym(sizes[rs.below(sizes.size())], size_syn));
    if (rs.uniform() < 0.15) p.push_back(intensities[rs.below(intensities.size())]);
    p.push_back(maybe_synonym(colors[rs.below(colors.size())], color_syn));
    p.push_back(maybe_synonym(shapes[rs.below(shapes.size())], shape_syn));
    if (rs.uniform() < 0.6) p.push_back(positions[rs.below(positions.size())]);
    return p;
}

TrainResult train_toy_model(const Vocabulary& vocab, const diffusion::NoiseSchedule& sched,
                            const TrainConfig& cfg) {
    if (cfg.n_pairs < 1000)
        throw std::invalid_argument("train_toy_model: n_pairs must be >= 1000");

    rng::Stream rs(rng::derive_seed(cfg.seed, "train"));

    // Training set: prompts and their rendered targets.
    std::vector<TokenList> prompts;
    std::vector<Tensor> renders;
    prompts.reserve(cfg.n_pairs);
    for (int i = 0; i < cfg.n_pairs; ++i) {
        prompts.push_back(sample_scene_prompt(rs, vocab));
        renders.push_back(render_scene(prompts.back(), vocab));
    }

    ToyModel model;
    model.vocab = vocab;
    model.vocab.embedding_table.requires_grad = true;
    model.weights = DenoiserWeights::init(rng::derive_seed(cfg.seed, "weights"));
    for (Tensor* p : model.weights.all()) p->requires_grad = true;
    model.sched = sched;

    std::vector<Tensor*> params = {&model.vocab.embedding_table};
    for (Tensor* p : model.weights.all()) params.push_back(p);

    // Adam state.
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<std::vector<double>> m(params.size()), v(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i]->data->size(), 0.0);
        v[i].assign(params[i]->data->size(), 0.0);
    }

    TrainResult result;
    result.loss_curve.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
        const int idx = static_cast<int>(rs.below(static_cast<std::uint64_t>(cfg.n_pairs)));
        const int t = static_cast<int>(rs.below(static_cast<std::uint64_t>(sched.train_steps)));
        auto noise = randn_tensor({3, kImageSize, kImageSize}, rs);
        const bool drop = rs.uniform() < cfg.cond_dropout;

        double loss_value = 0.0;
        std::vector<Tensor> grads;
        {
            ad::Tape tape;
            auto x_t = diffusion::q_sample(renders[idx], t, noise, sched);
            auto cond = drop ? text_encode(TokenList{}, model.vocab)
                             : text_encode(prompts[idx], model.vocab);
            auto eps_hat = denoiser_forward(x_t, t, cond, model.weights);
            auto loss = ad::mean(ad::pow(ad::sub(eps_hat, noise), 2.0));
            loss_value = loss.scalar_value();
            if (!std::isfinite(loss_value))
                throw std::runtime_error("train_toy_model: loss diverged at step " +
                                         std::to_string(step));
            tape.backward(loss);
            grads.reserve(params.size());
            for (Tensor* p : params) grads.push_back(tape.grad(*p));
        }

        const double corr1 = 1.0 - std::pow(b1, step + 1);
        const double corr2 = 1.0 - std::pow(b2, step + 1);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& pd = *params[i]->data;
            const auto& gd = grads[i].values();
            for (std::size_t k = 0; k < pd.size(); ++k) {
                m[i][k] = b1 * m[i][k] + (1.0 - b1) * gd[k];
                v[i][k] = b2 * v[i][k] + (1.0 - b2) * gd[k] * gd[k];
                pd[k] -= cfg.lr * (m[i][k] / corr1) / (std::sqrt(v[i][k] / corr2) + eps);
            }
        }
        result.loss_curve.push_back(loss_value);
    }

    model.vocab.embedding_table.requires_grad = false;
    for (Tensor* p : model.weights.all()) p->requires_grad = false;
    result.model = std::move(model);
    return result;
}

ReferenceEmbedder ReferenceEmbedder::make(std::uint64_t seed) {
    rng::Stream rs(rng::derive_seed(seed, "reference-embedder"));
    ReferenceEmbedder e;
    e.projection = randn_tensor({kEmbedDim, kImagePixels}, rs, 1.0 / std::sqrt(kImagePixels));
    return e;
}

Tensor ReferenceEmbedder::embed_image(const Tensor& image) const {
    auto flat = ad::reshape(image, {kImagePixels});
    auto v = ad::matmul(projection, flat);
    double ss = 0.0;
    for (double x : v.values()) ss += x * x;
    if (ss == 0.0) throw std::runtime_error("reference embedder: degenerate zero projection output");
    return ad::mul(v, ad::pow(ad::l2_norm(v), -1.0));
}

Tensor ReferenceEmbedder::embed_prompt(const TokenList& prompt, const Vocabulary& vocab) const {
    return embed_image(render_scene(prompt, vocab));
}

Tensor spherical_clip_loss(const Tensor& u, const Tensor& v) {
    auto norm_of = [](const Tensor& t) {
        double ss = 0.0;
        for (double x : t.values()) ss += x * x;
        return std::sqrt(ss);
    };
    if (std::abs(norm_of(u) - 1.0) > 1e-6 || std::abs(norm_of(v) - 1.0) > 1e-6)
        throw std::invalid_argument("spherical_clip_loss: inputs must be unit vectors");
    auto ratio = ad::clamp_max(ad::scale(ad::l2_norm(ad::sub(u, v)), 0.5), 1.0);
    auto s = ad::arcsin(ratio);
    return ad::scale(ad::mul(s, s), 2.0);
}

// --- file formats --------------------------------------------------------

namespace {

void write_tensor_raw(std::ofstream& out, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data->data()),
              static_cast<std::streamsize>(t.data->size() * sizeof(double)));
}

Tensor read_tensor_raw(std::ifstream& in, ad::Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(ad::numel_of(shape)));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor payload");
    return Tensor::from_vector(std::move(shape), std::move(v));
}

}  // namespace

void save_checkpoint(const std::string& path, const ToyModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);

    nlohmann::ordered_json header;
    header["format"] = "toy-ckpt-1";
    header["image_size"] = kImageSize;
    header["embed_dim"] = kEmbedDim;
    header["hidden"] = kHiddenDim;
    header["vocab_size"] = model.vocab.size();
    header["vocab_hash"] = model.vocab.hash();
    header["sched"] = {{"T", model.sched.train_steps},
                       {"beta_start", model.sched.betas.front()},
                       {"beta_end", model.sched.betas.back()},
                       {"infer_steps", model.sched.infer_steps}};
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    auto add_tensor = [&](const char* name, const Tensor& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape}});
    };
    add_tensor("embedding", model.vocab.embedding_table);
    add_tensor("w1", model.weights.w1);
    add_tensor("b1", model.weights.b1);
    add_tensor("w2", model.weights.w2);
    add_tensor("b2", model.weights.b2);
    add_tensor("w3", model.weights.w3);
    add_tensor("b3", model.weights.b3);
    header["tensors"] = tensors;
    out << header.dump() << "\n";

    write_tensor_raw(out, model.vocab.embedding_table);
    for (const Tensor* t : model.weights.all()) write_tensor_raw(out, *t);
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

ToyModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing header: " + path);
    auto header = nlohmann::json::parse(line);
    if (header.at("format") != "toy-ckpt-1")
        throw std::runtime_error("checkpoint: unknown format in " + path);

    ToyModel model;
    model.vocab = Vocabulary::standard(/*embed_seed=*/0);  // embeddings replaced below
    if (header.at("vocab_hash").get<std::uint64_t>() != model.vocab.hash())
        throw std::runtime_error("checkpoint: vocabulary hash mismatch in " + path);

    const auto& sc = header.at("sched");
    model.sched = diffusion::make_schedule(sc.at("T").get<int>(), sc.at("beta_start").get<double>(),
                                           sc.at("beta_end").get<double>(),
                                           sc.at("infer_steps").get<int>());

    auto shape_of = [&](std::size_t i) {
        return header.at("tensors").at(i).at("shape").get<std::vector<int>>();
    };
    model.vocab.embedding_table = read_tensor_raw(in, shape_of(0));
    model.weights.w1 = read_tensor_raw(in, shape_of(1));
    model.weights.b1 = read_tensor_raw(in, shape_of(2));
    model.weights.w2 = read_tensor_raw(in, shape_of(3));
    model.weights.b2 = read_tensor_raw(in, shape_of(4));
    model.weights.w3 = read_tensor_raw(in, shape_of(5));
    model.weights.b3 = read_tensor_raw(in, shape_of(6));
    return model;
}

void write_ppm(const Tensor& image, const std::string& path) {
    if (image.shape != ad::Shape{3, kImageSize, kImageSize})
        throw std::invalid_argument("write_ppm: expected a 3x16x16 image, got " +
                                    ad::shape_str(image.shape));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open for writing: " + path);
    out << "P6\n" << kImageSize << " " << kImageSize << "\n255\n";
    const auto& px = image.values();
    const int plane = kImageSize * kImageSize;
    for (int i = 0; i < plane; ++i) {
        for (int ch = 0; ch < 3; ++ch) {
            const double x = px[static_cast<std::size_t>(ch * plane + i)];
            const double mapped = std::clamp((x + 1.0) / 2.0, 0.0, 1.0) * 255.0;
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(mapped))));
        }
    }
    if (!out) throw std::runtime_error("write_ppm: write failed: " + path);
}

}  // namespace dpopt::toy
