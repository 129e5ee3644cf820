#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dpopt/toy_world.hpp"

using namespace dpopt;
using ad::Tensor;
using toy::TokenList;

namespace {

const toy::Vocabulary& vocab() {
    static const toy::Vocabulary v = toy::Vocabulary::standard(42);
    return v;
}

int lit_pixels(const Tensor& img) {
    int n = 0;
    const int plane = toy::kImageSize * toy::kImageSize;
    for (int i = 0; i < plane; ++i)
        if (img.at(i) != -1.0 || img.at(plane + i) != -1.0 || img.at(2 * plane + i) != -1.0) ++n;
    return n;
}

}  // namespace

TEST_CASE("render: large red square centered is a 10x10 block") {
    auto img = toy::render_scene({"red", "square", "center", "large"}, vocab());
    CHECK(img.shape == ad::Shape{3, 16, 16});
    CHECK(lit_pixels(img) == 100);
    const int plane = 16 * 16;
    // interior pixel (8, 8) is red
    CHECK(img.at(8 * 16 + 8) == 1.0);
    CHECK(img.at(plane + 8 * 16 + 8) == -1.0);
    // corner pixel (0, 0) is background
    CHECK(img.at(0) == -1.0);
    // block spans rows/cols 3..12
    CHECK(img.at(3 * 16 + 3) == 1.0);
    CHECK(img.at(2 * 16 + 3) == -1.0);
}

TEST_CASE("render: synonyms render identically to their canonical token") {
    auto a = toy::render_scene({"red", "square", "center", "large"}, vocab());
    auto b = toy::render_scene({"big", "red", "square", "center"}, vocab());
    CHECK(a.values() == b.values());
    auto c = toy::render_scene({"crimson", "box", "center", "huge"}, vocab());
    CHECK(a.values() == c.values());
}

TEST_CASE("render: empty and filler-only prompts are all background") {
    auto img = toy::render_scene({}, vocab());
    CHECK(lit_pixels(img) == 0);
    auto img2 = toy::render_scene({toy::kEmpty, "the", "very"}, vocab());
    CHECK(lit_pixels(img2) == 0);
}

TEST_CASE("render: defaults fall back to a centered small gray square") {
    auto img = toy::render_scene({"large"}, vocab());  // only a size token
    CHECK(lit_pixels(img) == 100);
    CHECK(img.at(8 * 16 + 8) == 0.0);  // gray
    auto img2 = toy::render_scene({"red"}, vocab());  // only a color: small square
    CHECK(lit_pixels(img2) == 16);
}

TEST_CASE("render: out-of-vocabulary token is a hard error") {
    CHECK_THROWS_WITH_AS(toy::render_scene({"dragon"}, vocab()), doctest::Contains("dragon"),
                         std::invalid_argument);
}

TEST_CASE("render: shapes and positions are distinct") {
    auto sq = toy::render_scene({"red", "square"}, vocab());
    auto ci = toy::render_scene({"red", "circle"}, vocab());
    auto cr = toy::render_scene({"red", "cross"}, vocab());
    auto st = toy::render_scene({"red", "stripe"}, vocab());
    CHECK(sq.values() != ci.values());
    CHECK(sq.values() != cr.values());
    CHECK(sq.values() != st.values());
    auto top = toy::render_scene({"red", "square", "top"}, vocab());
    auto bot = toy::render_scene({"red", "square", "bottom"}, vocab());
    CHECK(top.values() != bot.values());
}

TEST_CASE("text_encode: hard path") {
    SUBCASE("all-empty prompt encodes to the EMPTY embedding row") {
        auto cond = toy::text_encode(TokenList{}, vocab());
        const auto& table = vocab().embedding_table;
        for (int j = 0; j < toy::kEmbedDim; ++j)
            CHECK(cond.at(j) == doctest::Approx(table.at(j)).epsilon(1e-15));
    }
    SUBCASE("one-hot rows give the padded mean of embedding rows") {
        auto cond = toy::text_encode(TokenList{"red", "square"}, vocab());
        const auto& table = vocab().embedding_table;
        const int r = vocab().id("red"), s = vocab().id("square");
        for (int j = 0; j < toy::kEmbedDim; ++j) {
            const double want = (table.at(r * toy::kEmbedDim + j) + table.at(s * toy::kEmbedDim + j) +
                                 4.0 * table.at(j)) /
                                6.0;
            CHECK(cond.at(j) == doctest::Approx(want).epsilon(1e-12));
        }
    }
    SUBCASE("over-length prompt is rejected") {
        TokenList long_prompt(7, "red");
        CHECK_THROWS_AS(toy::text_encode(long_prompt, vocab()), std::invalid_argument);
    }
}

TEST_CASE("text_encode: soft rows") {
    const int v = vocab().size();
    SUBCASE("uniform 0.5/0.5 row lands on the midpoint") {
        auto row = Tensor::zeros({v});
        (*row.data)[vocab().id("red")] = 0.5;
        (*row.data)[vocab().id("green")] = 0.5;
        auto cond = toy::text_encode(std::vector<Tensor>{row}, vocab());
        auto red = toy::text_encode(TokenList{"red"}, vocab());
        auto green = toy::text_encode(TokenList{"green"}, vocab());
        for (int j = 0; j < toy::kEmbedDim; ++j)
            CHECK(cond.at(j) == doctest::Approx(0.5 * red.at(j) + 0.5 * green.at(j)).epsilon(1e-12));
    }
    SUBCASE("row not summing to one is a hard error") {
        auto row = Tensor::zeros({v});
        (*row.data)[1] = 0.9;
        CHECK_THROWS_AS(toy::text_encode(std::vector<Tensor>{row}, vocab()), std::invalid_argument);
    }
}

TEST_CASE("denoiser: output shape, zero weights, counters") {
    auto w = toy::DenoiserWeights::init(7);
    auto x = toy::render_scene({"blue", "circle"}, vocab());
    auto cond = toy::text_encode(TokenList{"blue", "circle"}, vocab());
    auto out = toy::denoiser_forward(x, 3, cond, w);
    CHECK(out.shape == x.shape);

    auto z = toy::DenoiserWeights::zeros();
    auto out0 = toy::denoiser_forward(x, 3, cond, z);
    for (std::int64_t i = 0; i < out0.numel(); ++i) CHECK(out0.at(i) == 0.0);

    // Counter increments once per grad-recorded forward, never when detached.
    ad::Tape tape;
    auto c2 = cond;
    c2.requires_grad = true;
    (void)toy::denoiser_forward(x, 3, c2, w);
    CHECK(tape.denoiser_forwards == 1);
    {
        ad::NoGradGuard ng;
        (void)toy::denoiser_forward(x, 3, c2, w);
    }
    CHECK(tape.denoiser_forwards == 1);
}

TEST_CASE("denoiser: gradient wrt conditioning matches finite differences") {
    auto w = toy::DenoiserWeights::init(11);
    auto x = toy::render_scene({"green", "cross", "top"}, vocab());
    auto cond = toy::text_encode(TokenList{"green", "cross", "top"}, vocab());
    auto probe = Tensor::from_vector({toy::kImagePixels}, [] {
        std::vector<double> v(toy::kImagePixels);
        rng::Stream rs(5);
        for (auto& x : v) x = rs.normal();
        return v;
    }());
    auto f = [&](const Tensor& c) {
        auto eps = toy::denoiser_forward(x, 5, c, w);
        return ad::sum(ad::mul(ad::reshape(eps, {toy::kImagePixels}), probe));
    };
    CHECK(ad::grad_check(f, cond, 1e-5) <= 1e-6);
}

TEST_CASE("reference embedder: unit norm, determinism, gradient") {
    auto emb = toy::ReferenceEmbedder::make(toy::kReferenceEmbedderSeed);
    auto img = toy::render_scene({"purple", "stripe"}, vocab());
    auto u = emb.embed_image(img);
    double ss = 0.0;
    for (double x : u.values()) ss += x * x;
    CHECK(std::abs(std::sqrt(ss) - 1.0) <= 1e-12);

    auto u2 = emb.embed_image(img);
    CHECK(u.values() == u2.values());

    auto emb2 = toy::ReferenceEmbedder::make(toy::kReferenceEmbedderSeed);
    CHECK(emb2.projection.values() == emb.projection.values());

    // gradient through embed + spherical loss, away from the zero-loss kink;
    // checked along well-conditioned random directions
    auto target = emb.embed_prompt({"green", "circle", "top"}, vocab());
    rng::Stream rs(17);
    std::vector<Tensor> dirs;
    for (int k = 0; k < 4; ++k) {
        std::vector<double> d(toy::kImagePixels);
        for (auto& x : d) x = rs.normal();
        dirs.push_back(Tensor::from_vector({3, 16, 16}, std::move(d)));
    }
    auto f = [&](const Tensor& coeff) {
        auto im = img;
        for (int k = 0; k < 4; ++k)
            im = ad::add(im, ad::mul(ad::slice(coeff, k, 1), dirs[k]));
        return toy::spherical_clip_loss(emb.embed_image(im), target);
    };
    CHECK(ad::grad_check(f, Tensor::zeros({4}), 1e-5) <= 1e-6);
}

TEST_CASE("embed_prompt: definitional anchors") {
    auto emb = toy::ReferenceEmbedder::make(toy::kReferenceEmbedderSeed);
    SUBCASE("loss of a rendered prompt against itself is zero") {
        auto img = toy::render_scene({"red", "square"}, vocab());
        auto loss = toy::spherical_clip_loss(emb.embed_image(img),
                                             emb.embed_prompt({"red", "square"}, vocab()));
        CHECK(loss.at(0) == 0.0);
    }
    SUBCASE("synonym substitution gives the identical embedding") {
        auto a = emb.embed_prompt({"large", "red", "square"}, vocab());
        auto b = emb.embed_prompt({"big", "crimson", "box"}, vocab());
        CHECK(a.values() == b.values());
    }
    SUBCASE("prompts differing in color are separated") {
        auto a = emb.embed_prompt({"red", "square"}, vocab());
        auto b = emb.embed_prompt({"green", "square"}, vocab());
        double dot = 0.0;
        for (int i = 0; i < toy::kEmbedDim; ++i) dot += a.at(i) * b.at(i);
        CHECK(dot < 1.0 - 1e-6);
    }
}

TEST_CASE("spherical loss anchors and symmetry") {
    const int d = toy::kEmbedDim;
    auto unit = [&](int axis, double sign) {
        auto t = Tensor::zeros({d});
        (*t.data)[axis] = sign;
        return t;
    };
    auto u = unit(0, 1.0);

    CHECK(toy::spherical_clip_loss(u, u).at(0) == 0.0);
    // antipodal: 2 (asin 1)^2 = pi^2/2
    CHECK(std::abs(toy::spherical_clip_loss(u, unit(0, -1.0)).at(0) - 4.934802200544679) <= 1e-12);
    // orthogonal: 2 (asin(sqrt(2)/2))^2 = pi^2/8
    CHECK(std::abs(toy::spherical_clip_loss(u, unit(1, 1.0)).at(0) - 1.2337005501361697) <= 1e-12);

    // symmetry and the zero-iff-equal property on random unit vectors
    rng::Stream rs(123);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> a(d), b(d);
        double na = 0, nb = 0;
        for (int i = 0; i < d; ++i) {
            a[i] = rs.normal();
            b[i] = rs.normal();
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        for (int i = 0; i < d; ++i) {
            a[i] /= std::sqrt(na);
            b[i] /= std::sqrt(nb);
        }
        auto ta = Tensor::from_vector({d}, a), tb = Tensor::from_vector({d}, b);
        CHECK(toy::spherical_clip_loss(ta, tb).at(0) == toy::spherical_clip_loss(tb, ta).at(0));
        CHECK(toy::spherical_clip_loss(ta, tb).at(0) > 0.0);
        CHECK(toy::spherical_clip_loss(ta, ta).at(0) <= 1e-12);
    }

    CHECK_THROWS_AS(toy::spherical_clip_loss(Tensor::full({d}, 0.5), u), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip and ppm bytes") {
    toy::ToyModel model;
    model.vocab = toy::Vocabulary::standard(3);
    model.weights = toy::DenoiserWeights::init(4);
    model.sched = diffusion::make_schedule(20, 1e-4, 0.02, 10);

    const std::string path = "test_ckpt_roundtrip.bin";
    toy::save_checkpoint(path, model);
    auto loaded = toy::load_checkpoint(path);
    CHECK(loaded.vocab.embedding_table.values() == model.vocab.embedding_table.values());
    CHECK(loaded.weights.w1.values() == model.weights.w1.values());
    CHECK(loaded.weights.b3.values() == model.weights.b3.values());
    CHECK(loaded.sched.train_steps == 20);
    CHECK(loaded.sched.infer_steps == 10);
    std::remove(path.c_str());

    auto img = toy::render_scene({"white", "square", "large"}, vocab());
    const std::string ppm = "test_img.ppm";
    toy::write_ppm(img, ppm);
    std::ifstream in(ppm, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(contents.substr(0, 3) == "P6\n");
    CHECK(contents.size() == std::string("P6\n16 16\n255\n").size() + 3 * 16 * 16);
    // background maps to round(0 * 255) = 0, white block to 255
    const std::size_t off = std::string("P6\n16 16\n255\n").size();
    CHECK(static_cast<unsigned char>(contents[off]) == 0);
    const std::size_t center = off + 3 * (8 * 16 + 8);
    CHECK(static_cast<unsigned char>(contents[center]) == 255);
    std::remove(ppm.c_str());
}
