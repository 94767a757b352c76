#include <doctest.h>

#include <cmath>

#include "portrait/checkpoint.hpp"
#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"
#include "portrait/training.hpp"

using namespace portrait;

namespace {
Config small_config() {
    Config cfg;
    cfg.model.d = 16;
    cfg.model.refiner_layers = 1;
    cfg.model.refiner_heads = 2;
    cfg.model.t_local = 17;
    cfg.model.d1 = 8;
    cfg.model.d2 = 8;
    cfg.model.d_text = 8;
    cfg.model.t_text = 4;
    cfg.diffusion.image_size = 32;
    cfg.diffusion.unet_c0 = 8;
    cfg.diffusion.unet_c1 = 8;
    cfg.diffusion.unet_c2 = 8;
    cfg.diffusion.time_dim = 16;
    cfg.diffusion.vae_c0 = 4;
    cfg.diffusion.vae_c1 = 8;
    cfg.diffusion.vae_c2 = 8;
    cfg.training.batch_size = 2;
    cfg.training.lr = 1e-3;
    return cfg;
}

TrainingSet small_set(const Config& cfg, int count = 5) {
    MorphableModel morph = make_toy_morphable_model(cfg.morphable.n_id, cfg.morphable.n_exp,
                                                    cfg.morphable.model_seed);
    auto faces = make_identity_group(morph, 555, count, cfg.diffusion.image_size, 99);
    TrainingSet set;
    for (auto& f : faces) set.add(f.image, f.keypoints, "a studio portrait", "id555");
    return set;
}
}  // namespace

TEST_CASE("loss_sd: spec cases and oracle") {
    Tensor eps = Tensor::from({4}, {0.3, -0.5, 1.0, 0.2});
    CHECK(loss_sd(eps, eps) == 0.0);

    Tensor zero = Tensor::zeros({4});
    Tensor ones = Tensor::full({4}, 1.0);
    CHECK(loss_sd(zero, ones) == doctest::Approx(2.0).epsilon(1e-15));

    Rng rng(3);
    Tensor a = Tensor::randn({2, 2}, rng);
    Tensor b = Tensor::randn({2, 2}, rng);
    double want = 0.0;
    for (int i = 0; i < 4; ++i) want += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    want = std::sqrt(want);
    CHECK(loss_sd(a, b) == doctest::Approx(want).epsilon(1e-15));

    // Graph version agrees.
    Graph g;
    CHECK(g.val(loss_sd_graph(g, a, g.input(b))).data[0] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("loss_id: gate and cosine cases") {
    ImageTensor img(8, 8);
    Tensor f_id = Tensor::from({2}, {1.0, 0.0});
    auto embed_orth = [](const ImageTensor&) { return Tensor::from({2}, {0.0, 1.0}); };
    auto embed_same = [](const ImageTensor&) { return Tensor::from({2}, {1.0, 0.0}); };
    DetectorFn gate_off = [](const ImageTensor&) { return 0; };
    DetectorFn gate_on = [](const ImageTensor&) { return 1; };

    CHECK(loss_id(img, f_id, gate_off, embed_orth) == 0.0);
    CHECK(loss_id(img, f_id, gate_on, embed_same) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(loss_id(img, f_id, gate_on, embed_orth) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("total_loss: weighted sum") {
    CHECK(total_loss(1.0, 0.5, 0.1) == doctest::Approx(1.05).epsilon(1e-15));
    CHECK(total_loss(0.7, 123.0, 0.0) == doctest::Approx(0.7));
    CHECK(total_loss(0.7, 0.0, 0.1) == doctest::Approx(0.7));
}

TEST_CASE("prompt dropout frequency within one percent of configured rate") {
    Rng rng(2024);
    int dropped = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        if (drop_prompt(rng, 0.10)) dropped++;
    double freq = static_cast<double>(dropped) / n;
    CHECK(std::fabs(freq - 0.10) < 0.01);
}

TEST_CASE("make_train_sample: reference count, exclusion, landmark") {
    Config cfg = small_config();
    ModelState model = ModelState::build(cfg);
    TrainingSet set = small_set(cfg, 6);
    Rng rng(17);
    for (int i = 0; i < 20; ++i) {
        TrainSample s = make_train_sample(set, model, rng);
        CHECK(s.references.size() >= 1);
        CHECK(s.references.size() <= 4);
        uint64_t target_key = s.target.content_key();
        for (auto& r : s.references) CHECK(r.content_key() != target_key);
        // Landmark image is a non-empty rasterization at the training size.
        CHECK(s.landmark.height == cfg.diffusion.image_size);
        CHECK(s.landmark.width == cfg.diffusion.image_size);
        double lit = 0;
        for (double v : s.landmark.pixels) lit += v;
        CHECK(lit > 0.0);
    }
}

TEST_CASE("train_step: determinism and frozen invariance") {
    Config cfg = small_config();
    TrainingSet set = small_set(cfg);

    auto run = [&](int steps) {
        ModelState model = ModelState::build(cfg);
        TrainState st;
        init_train_state(model, st, 42);
        Rng data_rng(7);
        std::vector<double> losses;
        for (int i = 0; i < steps; ++i) {
            auto batch = make_batch(set, model, data_rng, cfg.training.batch_size);
            LossReport rep = train_step(model, st, batch);
            losses.push_back(rep.l_total);
            CHECK(std::isfinite(rep.l_total));
        }
        assert_frozen(model, st);
        std::vector<ParamTensor*> tr = model.trainable_params();
        return std::make_pair(losses, params_checksum(tr));
    };
    auto [la, ca] = run(3);
    auto [lb, cb] = run(3);
    CHECK(la == lb);
    CHECK(ca == cb);
}

TEST_CASE("train_step: alpha=0 moves trainables only; frozen mutation detected") {
    Config cfg = small_config();
    cfg.training.alpha = 0.0;
    TrainingSet set = small_set(cfg);
    ModelState model = ModelState::build(cfg);
    TrainState st;
    init_train_state(model, st, 42);
    std::vector<ParamTensor*> trainables = model.trainable_params();
    uint32_t before_train = params_checksum(trainables);
    uint32_t before_frozen = frozen_checksum(model);

    Rng data_rng(9);
    auto batch = make_batch(set, model, data_rng, 2);
    LossReport rep = train_step(model, st, batch);
    CHECK(rep.l_id == 0.0);
    CHECK(rep.l_total == rep.l_sd);
    CHECK(params_checksum(trainables) != before_train);
    CHECK(frozen_checksum(model) == before_frozen);
    assert_frozen(model, st);

    // Tampering with a frozen tensor trips the guard.
    model.unet.conv_out.w.value.data[0] += 1.0;
    CHECK_THROWS_AS(assert_frozen(model, st), Error);
    try {
        assert_frozen(model, st);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::FrozenParameterMutation);
    }
}

TEST_CASE("train_step: gate law at the batch level") {
    Config cfg = small_config();
    cfg.training.prompt_dropout = 0.0;
    TrainingSet set = small_set(cfg);
    // Detector gates off every sample: total must equal l_sd exactly.
    ModelState model = ModelState::build(cfg);
    TrainState st;
    init_train_state(model, st, 5);
    Rng data_rng(11);
    auto batch = make_batch(set, model, data_rng, 2);
    DetectorFn off = [](const ImageTensor&) { return 0; };
    LossReport rep = train_step(model, st, batch, &off);
    CHECK(rep.gated_on == 0);
    CHECK(rep.l_id == 0.0);
    CHECK(rep.l_total == rep.l_sd);

    // Mixed gates: l_total = l_sd + alpha * l_id with l_id from gated-on only.
    ModelState model2 = ModelState::build(cfg);
    TrainState st2;
    init_train_state(model2, st2, 5);
    Rng data_rng2(11);
    auto batch2 = make_batch(set, model2, data_rng2, 2);
    int call = 0;
    DetectorFn alternating = [&call](const ImageTensor&) { return (call++) % 2; };
    LossReport rep2 = train_step(model2, st2, batch2, &alternating);
    CHECK(rep2.gated_on == 1);
    CHECK(rep2.l_id > 0.0);
    CHECK(rep2.l_total == doctest::Approx(rep2.l_sd + cfg.training.alpha * rep2.l_id).epsilon(1e-15));
}

TEST_CASE("config: parse, canonical round trip, rejection") {
    Config def;
    std::string canon = def.canonical();
    Config re = Config::parse(canon);
    CHECK(re.hash() == def.hash());
    CHECK(re.canonical() == canon);

    Config j = Config::from_json(def.to_json());
    CHECK(j.hash() == def.hash());

    Config changed = Config::parse("[training]\nlr = 3e-4\n");
    CHECK(changed.training.lr == doctest::Approx(3e-4));
    CHECK(changed.hash() != def.hash());

    CHECK_THROWS_AS(Config::parse("[training]\nbogus_key = 1\n"), Error);
    CHECK_THROWS_AS(Config::parse("[bogus_section]\nlr = 1\n"), Error);
    CHECK_THROWS_AS(Config::parse("[training]\nlr = not_a_number\n"), Error);
    CHECK_THROWS_AS(Config::parse("[model]\nfusion_mode = nonsense\n"), Error);
    CHECK_THROWS_AS(Config::parse("[training]\nprompt_dropout = 1.5\n"), Error);
}

TEST_CASE("checkpoint: round trip, missing file, corruption") {
    Config cfg = small_config();
    ModelState model = ModelState::build(cfg);
    // Make values distinctive.
    Rng rng(33);
    for (ParamTensor* p : model.trainable_params())
        for (double& v : p->value.data) v += 0.01 * rng.normal();

    std::string path = "/tmp/portrait_ckpt_test.hfpc";
    save_checkpoint(path, model);

    ModelState loaded = load_checkpoint_state(path);
    CHECK(loaded.cfg.hash() == cfg.hash());
    // Values match at float32 precision: saving the loaded state reproduces
    // the file byte for byte.
    std::string path2 = "/tmp/portrait_ckpt_test2.hfpc";
    save_checkpoint(path2, loaded);
    FILE* a = fopen(path.c_str(), "rb");
    FILE* b = fopen(path2.c_str(), "rb");
    REQUIRE(a);
    REQUIRE(b);
    int ca, cb2;
    do {
        ca = fgetc(a);
        cb2 = fgetc(b);
        CHECK(ca == cb2);
    } while (ca != EOF && cb2 != EOF);
    fclose(a);
    fclose(b);

    CHECK_THROWS_AS(load_checkpoint_state("/tmp/portrait_no_such.hfpc"), Error);
    try {
        load_checkpoint_state("/tmp/portrait_no_such.hfpc");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CheckpointNotFound);
    }

    // Flip one payload byte: CRC must catch it.
    {
        FILE* f = fopen(path.c_str(), "r+b");
        REQUIRE(f);
        fseek(f, 64, SEEK_SET);
        int c = fgetc(f);
        fseek(f, 64, SEEK_SET);
        fputc(c ^ 0xff, f);
        fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint_state(path), Error);
    remove(path.c_str());
    remove(path2.c_str());
}
