#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpopt/rng.hpp"
#include "dpopt/schedule.hpp"
#include "dpopt/tensor.hpp"

namespace dpopt::toy {

inline constexpr int kImageSize = 16;
inline constexpr int kImagePixels = 3 * kImageSize * kImageSize;
inline constexpr int kEmbedDim = 32;
inline constexpr int kTimeFeatDim = 16;
inline constexpr int kHiddenDim = 256;
inline constexpr int kPromptSlots = 6;  // prompts are padded with EMPTY to this length

inline const std::string kEmpty = "<empty>";

using TokenList = std::vector<std::string>;

// Token table plus the learnable conditioning embeddings. EMPTY sits at
// index 0 and renders nothing.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;
    ad::Tensor embedding_table;  // {V, kEmbedDim}

    static Vocabulary standard(std::uint64_t embed_seed);

    int size() const { return static_cast<int>(tokens.size()); }
    bool contains(const std::string& w) const { return index.count(w) > 0; }
    int id(const std::string& w) const;  // hard error naming the token
    std::uint64_t hash() const;          // over the token list
};

// Deterministic rasterizer: the ground-truth scene for a prompt.
// Unspecified attributes fall back to a centered small gray square; an
// all-empty prompt renders pure background (-1).
ad::Tensor render_scene(const TokenList& prompt, const Vocabulary& vocab);

// Mean-over-slots conditioning encoder (pads with EMPTY to kPromptSlots).
// Hard path: token list. Soft path: one weight row over the full vocabulary
// per slot, each summing to 1; differentiable through the rows.
ad::Tensor text_encode(const TokenList& prompt, const Vocabulary& vocab);
ad::Tensor text_encode(const std::vector<ad::Tensor>& soft_rows, const Vocabulary& vocab);

// Denoiser MLP weights: three affine layers with silu in between.
struct DenoiserWeights {
    ad::Tensor w1, b1, w2, b2, w3, b3;

    static DenoiserWeights init(std::uint64_t seed);
    static DenoiserWeights zeros();
    std::vector<ad::Tensor*> all() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
    std::vector<const ad::Tensor*> all() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

// Sinusoidal features of the timestep, kTimeFeatDim wide.
ad::Tensor time_features(int t);

// eps_hat prediction. Bumps the active tape's denoiser counter when the
// call is recorded.
ad::Tensor denoiser_forward(const ad::Tensor& x_t, int t, const ad::Tensor& cond,
                            const DenoiserWeights& weights);

// Optional external call accounting for run reports.
struct CallCounters {
    long total_forwards = 0;
    long grad_forwards = 0;
};

struct ToyModel {
    Vocabulary vocab;
    DenoiserWeights weights;
    diffusion::NoiseSchedule sched;

    diffusion::DenoiserFn denoiser(CallCounters* counters = nullptr) const;
};

struct TrainConfig {
    int n_pairs = 2000;
    int steps = 24000;
    double lr = 1e-3;
    double cond_dropout = 0.1;
    std::uint64_t seed = 1;
};

struct TrainResult {
    ToyModel model;
    std::vector<double> loss_curve;  // one entry per step
};

// Denoising-loss training with conditioning dropout (the unconditional
// branch of classifier-free guidance). Deterministic in (vocab seed, config).
TrainResult train_toy_model(const Vocabulary& vocab, const diffusion::NoiseSchedule& sched,
                            const TrainConfig& cfg);

// Draws a content-bearing prompt from the training distribution.
TokenList sample_scene_prompt(rng::Stream& rs, const Vocabulary& vocab);

// Fixed random projection playing the image/text encoder's role. Outputs are
// unit L2 norm and bit-stable given the seed.
struct ReferenceEmbedder {
    ad::Tensor projection;  // {kEmbedDim, kImagePixels}

    static ReferenceEmbedder make(std::uint64_t seed);
    ad::Tensor embed_image(const ad::Tensor& image) const;
    ad::Tensor embed_prompt(const TokenList& prompt, const Vocabulary& vocab) const;
};

inline constexpr std::uint64_t kReferenceEmbedderSeed = 0x5eedc11b;

// 2 * asin(|u - v| / 2)^2 between unit vectors; range [0, pi^2/2].
ad::Tensor spherical_clip_loss(const ad::Tensor& u, const ad::Tensor& v);

// --- file formats --------------------------------------------------------

// Checkpoint: one JSON header line, then raw little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const ToyModel& model);
ToyModel load_checkpoint(const std::string& path);

// Binary PPM (P6), maxval 255, pixel = round(clamp((x+1)/2, 0, 1) * 255).
void write_ppm(const ad::Tensor& image, const std::string& path);

}  // namespace dpopt::toy
