#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "common.hpp"
#include "difl/errors.hpp"
#include "difl/trainer.hpp"

using namespace difl;

namespace {

TrainConfig micro_train_config(const std::string& out) {
    TrainConfig c;
    c.network = testing::micro_config(16);
    c.epochs_constant = 2;
    c.epochs_decay = 2;
    c.crop_size = 16;
    c.scale_size = 16;
    c.pool_size = 3;
    c.checkpoint_every = 2;
    c.iterations_per_epoch = 3;
    c.output_dir = out;
    c.seed = 5;
    return c;
}

TrainingData synthetic_data(int n_domains, int per_domain) {
    TrainingData d;
    std::vector<std::string> names;
    for (int i = 0; i < n_domains; ++i) names.push_back("dom" + std::to_string(i + 1));
    d.domains = make_domains(names);
    for (const auto& dom : d.domains)
        for (int k = 0; k < per_domain; ++k)
            d.images[dom.index].push_back(testing::random_image(16, 16, dom.index * 100 + k));
    return d;
}

std::map<int, uint32_t> checksums(const Banks& b) {
    std::map<int, uint32_t> out;
    for (const auto& d : b.generators.domains())
        out[d.index] = parameter_checksum(b.generators.parameters(d)) ^
                       (parameter_checksum(b.discriminators.parameters(d)) * 31u);
    return out;
}

}  // namespace

TEST_CASE("domain pair sampling") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto [a, b] = sample_domain_pair(2, rng);
        CHECK(((a == 1 && b == 2) || (a == 2 && b == 1)));
    }
    CHECK_THROWS_AS(sample_domain_pair(1, rng), ConfigError);

    const int n = 12, samples = 12000;
    std::map<std::pair<int, int>, int> counts;
    for (int i = 0; i < samples; ++i) {
        const auto p = sample_domain_pair(n, rng);
        REQUIRE(p.first != p.second);
        REQUIRE(p.first >= 1);
        REQUIRE(p.second <= n);
        ++counts[p];
    }
    CHECK(counts.size() == 132);
    const double p = 1.0 / 132, mean = samples * p, sigma = std::sqrt(samples * p * (1 - p));
    double chi2 = 0;
    for (const auto& [_, c] : counts) {
        CHECK(std::abs(c - mean) <= 4 * sigma);
        chi2 += (c - mean) * (c - mean) / mean;
    }
    // 131 degrees of freedom: mean 131, sd ~16.2; 6 sd is a generous bound.
    CHECK(chi2 < 131 + 6 * 16.2);
}

TEST_CASE("learning rate schedule") {
    TrainConfig c;
    const double a = 2e-4;
    CHECK(lr_schedule(0, c) == a);
    CHECK(lr_schedule(299, c) == a);
    CHECK(lr_schedule(450, c) == doctest::Approx(a * (1 - 151.0 / 300)).epsilon(1e-12));
    CHECK(lr_schedule(598, c) == doctest::Approx(a / 300).epsilon(1e-9));
    CHECK(lr_schedule(599, c) == 0.0);
    double prev = a;
    for (int64_t e = 0; e < 600; ++e) {
        const double lr = lr_schedule(e, c);
        CHECK(lr <= prev);
        CHECK(lr >= 0.0);
        prev = lr;
    }
    CHECK_THROWS_AS(lr_schedule(-1, c), RangeError);
    CHECK_THROWS_AS(lr_schedule(600, c), RangeError);
}

TEST_CASE("lambda2 schedule") {
    TrainConfig c;
    CHECK(lambda2_schedule(100, c) == 0.0);  // no FCL phase configured
    c.weights.lambda2 = 0.1;
    CHECK(lambda2_schedule(100, c) == 0.1);
    c.weights.lambda2 = 0.0;
    c.fcl_start_epoch = 300;
    CHECK(lambda2_schedule(299, c) == 0.0);
    CHECK(lambda2_schedule(300, c) == doctest::Approx(0.05));
    CHECK(lambda2_schedule(450, c) == doctest::Approx(0.075));
    CHECK(lambda2_schedule(600, c) == doctest::Approx(0.1));
    double prev = 0.05;
    for (int64_t e = 300; e < 600; ++e) {
        const double l = lambda2_schedule(e, c);
        CHECK(l >= prev);
        CHECK(l <= 0.1);
        prev = l;
    }
}

TEST_CASE("train config key/values") {
    TrainConfig c;
    c.fcl_start_epoch = 12;
    c.fcl_metric = FeatureMetric::Cosine;
    c.fcl_reduction = FeatureReduction::Norm;
    c.base_lr = 1.0 / 3.0;
    c.network.base_channels = 16;
    const auto back = TrainConfig::from_key_values(c.to_key_values());
    CHECK(back.to_key_values() == c.to_key_values());
    CHECK(back.fcl_start_epoch == 12);
    CHECK(back.base_lr == c.base_lr);
    CHECK(back.network == c.network);
    CHECK_THROWS_AS(TrainConfig::from_key_values({{"not_a_key", "1"}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_key_values({{"fcl_metric", "manhattan"}}), ConfigError);

    auto d = c;
    d.output_dir = "elsewhere";
    CHECK(d.hash() == c.hash());
    d.seed = 99;
    CHECK(d.hash() != c.hash());

    TrainConfig bad;
    bad.crop_size = 300;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.lambda2_end = 0.01;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.fcl_start_epoch = 600;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("preprocess") {
    TrainConfig c;
    RawImage img{1024, 768, std::vector<uint8_t>(1024 * 768 * 3)};
    for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<uint8_t>((i * 7) % 256);
    std::mt19937_64 r1(3), r2(3);
    const auto t1 = preprocess(img, c, r1, true);
    CHECK(t1.sizes() == (std::vector<int64_t>{1, 3, 256, 256}));
    CHECK(t1.min().item<double>() >= -1.0);
    CHECK(t1.max().item<double>() <= 1.0);
    CHECK(torch::equal(t1, preprocess(img, c, r2, true)));
    const auto inf = preprocess(img, c, r1, false);
    CHECK(inf.sizes() == (std::vector<int64_t>{1, 3, 288, 384}));

    const auto x = testing::random_image(8, 8, 1);
    CHECK(torch::equal(random_crop(x, 8, r1), x));
    CHECK_THROWS_AS(random_crop(x, 9, r1), ShapeError);

    RawImage tiny{1, 1, {0, 255, 128}};
    const auto t = to_tensor(tiny);
    CHECK(t[0][0][0][0].item<float>() == -1.0f);
    CHECK(t[0][1][0][0].item<float>() == 1.0f);
    CHECK_THROWS_AS(to_tensor(RawImage{2, 2, {1, 2, 3}}), IoError);
}

TEST_CASE("image pool") {
    std::mt19937_64 rng(1);
    ImagePool pool(2);
    for (int i = 0; i < 10; ++i) {
        const auto x = torch::full({1, 3, 2, 2}, static_cast<float>(i));
        const auto y = pool.query(x, rng);
        CHECK(y.sizes() == x.sizes());
        CHECK(y.max().item<float>() <= static_cast<float>(i));
    }
    CHECK(pool.size() == 2);
    ImagePool none(0);
    const auto x = torch::ones({2, 3, 2, 2});
    CHECK(torch::equal(none.query(x, rng), x));
}

TEST_CASE("train_step isolates untouched domains and records history") {
    auto cfg = micro_train_config("unused");
    const auto ds = make_domains({"a", "b", "c"});
    Trainer t(init_bank(cfg.network, ds, 2), cfg);
    t.begin_epoch(0);
    const auto before = checksums(t.banks());
    t.train_step(ds[0], testing::random_image(16, 16, 1), ds[1], testing::random_image(16, 16, 2));
    const auto after = checksums(t.banks());
    CHECK(after.at(3) == before.at(3));
    CHECK(after.at(1) != before.at(1));
    CHECK(after.at(2) != before.at(2));
    CHECK(t.state().loss_history.size() == 1);
    t.train_step(ds[2], testing::random_image(16, 16, 3), ds[1], testing::random_image(16, 16, 4));
    CHECK(t.state().loss_history.size() == 2);
    CHECK(checksums(t.banks()).at(1) == after.at(1));
    CHECK_THROWS_AS(t.train_step(ds[0], testing::random_image(16, 16, 1), ds[0], testing::random_image(16, 16, 2)),
                    ConfigError);
}

TEST_CASE("single generator step descends the adversarial loss") {
    auto cfg = micro_train_config("unused");
    cfg.weights = {0.0, 0.0};
    cfg.base_lr = 1e-4;
    const auto ds = make_domains({"a", "b"});
    auto banks = init_bank(cfg.network, ds, 4);
    banks.generators.to(torch::kFloat64);
    banks.discriminators.to(torch::kFloat64);
    Trainer t(banks, cfg);
    t.begin_epoch(0);
    const auto a = testing::random_image(16, 16, 1).to(torch::kFloat64);
    const auto b = testing::random_image(16, 16, 2).to(torch::kFloat64);
    auto gan = [&] {
        torch::NoGradGuard ng;
        const auto terms = t.forward_terms(ds[0], a, ds[1], b, false);
        return (terms.gan_ab + terms.gan_ba).item<double>();
    };
    const double before = gan();
    const auto dis_before = checksums(t.banks());
    t.train_step(ds[0], a, ds[1], b, {.update_discriminators = false});
    CHECK(gan() < before);
    // Discriminators stayed frozen.
    for (const auto& d : ds)
        CHECK(parameter_checksum(t.banks().discriminators.parameters(d)) ==
              parameter_checksum(banks.discriminators.parameters(d)));
    (void)dis_before;
}

TEST_CASE("non-finite loss aborts") {
    auto cfg = micro_train_config("unused");
    const auto ds = make_domains({"a", "b"});
    Trainer t(init_bank(cfg.network, ds, 2), cfg);
    t.begin_epoch(0);
    auto bad = testing::random_image(16, 16, 1);
    bad[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(t.train_step(ds[0], bad, ds[1], testing::random_image(16, 16, 2)), TrainingDiverged);
}

TEST_CASE("fit writes log, checkpoints and is reproducible") {
    const auto dir = testing::scratch_dir("fit");
    auto cfg = micro_train_config((dir / "run1").string());
    const auto data = synthetic_data(3, 4);
    const auto r1 = fit(data, cfg);
    CHECK(r1.checkpoints.size() == 2);
    CHECK(std::filesystem::exists(checkpoint_path(dir / "run1", 2)));
    CHECK(std::filesystem::exists(checkpoint_path(dir / "run1", 4)));
    CHECK(r1.state.epoch == 4);
    CHECK(r1.state.loss_history.size() == 12);
    {
        std::ifstream log(dir / "run1" / "train_log.csv");
        std::string line;
        std::getline(log, line);
        CHECK(line == "epoch,iter,pair,gan_ab,gan_ba,cycle,feature,total,lr,lambda2");
        int rows = 0;
        while (std::getline(log, line)) ++rows;
        CHECK(rows == 12);
    }

    cfg.output_dir = (dir / "run2").string();
    const auto r2 = fit(data, cfg);
    REQUIRE(r2.state.loss_history.size() == r1.state.loss_history.size());
    for (size_t i = 0; i < r1.state.loss_history.size(); ++i)
        CHECK(r1.state.loss_history[i].loss.total == r2.state.loss_history[i].loss.total);
    CHECK(checksums(r1.banks) == checksums(r2.banks));
}

TEST_CASE("resume continues a run and applies the FCL phase") {
    const auto dir = testing::scratch_dir("resume");
    auto cfg = micro_train_config((dir / "phase1").string());
    const auto data = synthetic_data(3, 3);
    const auto p1 = fit(data, cfg);

    auto cfg2 = cfg;
    cfg2.output_dir = (dir / "phase2").string();
    cfg2.fcl_start_epoch = 2;
    FitOptions opts;
    opts.resume_from = checkpoint_path(dir / "phase1", 2);
    std::vector<std::pair<int64_t, double>> seen;
    opts.on_epoch_end = [&](int64_t done, Trainer& t) { seen.emplace_back(done, t.state().current_lambda2); };
    const auto p2 = fit(data, cfg2, opts);
    REQUIRE(seen.size() == 2);
    CHECK(seen[0].first == 3);
    CHECK(seen[0].second == doctest::Approx(0.05));
    CHECK(seen[1].second == doctest::Approx(0.075));
    CHECK(p2.state.loss_history.size() == 6);  // only the resumed epochs
    for (const auto& h : p2.state.loss_history) CHECK(h.loss.feature >= 0.0);

    SUBCASE("domain mismatch") {
        auto other = synthetic_data(2, 3);
        CHECK_THROWS_AS(fit(other, cfg2, opts), CheckpointError);
    }
    SUBCASE("network mismatch") {
        auto cfg3 = cfg2;
        cfg3.network.base_channels = 4;
        CHECK_THROWS_AS(fit(data, cfg3, opts), CheckpointError);
    }
    SUBCASE("checkpoint at the end of the schedule") {
        opts.resume_from = checkpoint_path(dir / "phase1", 4);
        CHECK_THROWS_AS(fit(data, cfg2, opts), CheckpointError);
    }
}

TEST_CASE("resumed trainer restores weights, epoch and rng") {
    const auto dir = testing::scratch_dir("resume_state");
    auto cfg = micro_train_config((dir / "r").string());
    const auto ds = make_domains({"a", "b", "c"});
    Trainer t(init_bank(cfg.network, ds, 2), cfg);
    t.begin_epoch(0);
    t.train_step(ds[0], testing::random_image(16, 16, 1), ds[1], testing::random_image(16, 16, 2));
    t.state().epoch = 1;
    t.save_checkpoint(dir / "c.pt");
    auto r = Trainer::resume(dir / "c.pt", cfg, ds);
    CHECK(r.state().epoch == 1);
    CHECK(checksums(r.banks()) == checksums(t.banks()));
    CHECK(r.state().rng() == t.state().rng());
    // Same next step on both, including restored Adam moments.
    const auto a = testing::random_image(16, 16, 5), b = testing::random_image(16, 16, 6);
    r.begin_epoch(1);
    t.begin_epoch(1);
    const auto l1 = t.train_step(ds[0], a, ds[1], b, {.update_discriminators = false});
    const auto l2 = r.train_step(ds[0], a, ds[1], b, {.update_discriminators = false});
    CHECK(l1.total == l2.total);
    CHECK(parameter_checksum(t.banks().generators.parameters(ds[0])) ==
          parameter_checksum(r.banks().generators.parameters(ds[0])));
}
