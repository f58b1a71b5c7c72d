#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fedrir/config.hpp"

using namespace fedrir;

namespace {

ExperimentConfig parse(const std::string& text) {
    std::istringstream is(text);
    ExperimentConfig cfg;
    cfg.parse_stream(is, "<test>");
    return cfg;
}

}  // namespace

TEST_CASE("config file parsing") {
    SUBCASE("sections, comments and whitespace") {
        auto cfg = parse(
            "# leading comment\n"
            "[data]\n"
            "classes = 4   # trailing comment\n"
            "  per_class=30\n"
            "\n"
            "[train]\n"
            "lr = 0.001\n");
        CHECK(cfg.get("data.classes", "") == "4");
        CHECK(cfg.get("data.per_class", "") == "30");
        CHECK(cfg.get("train.lr", "") == "0.001");
    }
    SUBCASE("later assignments win") {
        auto cfg = parse("[train]\nlr = 0.1\nlr = 0.2\n");
        CHECK(cfg.get("train.lr", "") == "0.2");
    }
    SUBCASE("unknown key is a hard error naming the key") {
        try {
            parse("[train]\nlearning_rate = 0.1\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("train.learning_rate") !=
                  std::string::npos);
        }
    }
    SUBCASE("key outside any section") {
        CHECK_THROWS_AS(parse("lr = 0.1\n"), ConfigError);
    }
    SUBCASE("malformed section header") {
        CHECK_THROWS_AS(parse("[train\nlr = 0.1\n"), ConfigError);
    }
    SUBCASE("missing equals sign") {
        CHECK_THROWS_AS(parse("[train]\nlr 0.1\n"), ConfigError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/f.ini"),
                        ConfigError);
    }
}

TEST_CASE("command line overrides") {
    auto cfg = parse("[train]\nlr = 0.1\n");
    SUBCASE("override wins over the file value") {
        cfg.apply_override("train.lr=0.5");
        CHECK(cfg.get("train.lr", "") == "0.5");
    }
    SUBCASE("unknown key rejected") {
        CHECK_THROWS_AS(cfg.apply_override("train.bogus=1"), ConfigError);
    }
    SUBCASE("missing value rejected") {
        CHECK_THROWS_AS(cfg.apply_override("train.lr"), ConfigError);
    }
}

TEST_CASE("federation config mapping") {
    SUBCASE("empty config yields library defaults") {
        FederationConfig fc = ExperimentConfig{}.to_federation_config();
        CHECK(fc.clients == 20);
        CHECK(fc.rounds == 50);
        CHECK(fc.lr == 5e-4);
        CHECK(fc.batch_size == 100);
        CHECK(fc.local_epochs == 1);
        CHECK(fc.mask.ratio == 0.6);
        CHECK(fc.algorithm == Algorithm::kFedRir);
        CHECK(fc.ablation == Ablation::kNone);
        CHECK(fc.idm_mode == IdmMode::kAlternating);
        CHECK(fc.partition.kind == PartitionKind::kPathological);
        CHECK(fc.partition.train_fraction == 0.75);
        CHECK(fc.data.classes == 6);
        CHECK(fc.data.blob_spread == ExperimentConfig::kDefaultBlobSpread);
        CHECK(fc.dims.input == fc.data.dim);
        CHECK(fc.dims.classes == fc.data.classes);
        CHECK(fc.dims.hidden == std::vector<int>{128, 128});
    }
    SUBCASE("every section maps through") {
        auto cfg = parse(
            "[data]\nclasses = 4\nper_class = 50\ndim = 16\nblob_spread = 0.3\n"
            "[partition]\nkind = dirichlet\nalpha = 0.5\ntrain_fraction = 0.8\n"
            "[federation]\nclients = 7\njoin_ratio = 0.4:0.8\nrounds = 9\n"
            "algorithm = local\nseed = 42\n"
            "[model]\nk_cs = 5\nk_g = 6\nhidden = 32,16\nidm_hidden = 8,8\n"
            "[train]\nlr = 0.002\nbatch_size = 25\nmask_ratio = 0.3\n"
            "mask_mode = patch\npatch_edge = 2\nidm_mode = joint\n");
        FederationConfig fc = cfg.to_federation_config();
        CHECK(fc.data.classes == 4);
        CHECK(fc.data.per_class == 50);
        CHECK(fc.data.dim == 16);
        CHECK(fc.data.blob_spread == 0.3);
        CHECK(fc.partition.kind == PartitionKind::kDirichlet);
        CHECK(fc.partition.alpha == 0.5);
        CHECK(fc.partition.train_fraction == 0.8);
        CHECK(fc.clients == 7);
        CHECK(fc.partition.clients == 7);
        CHECK(fc.rho.lo == 0.4);
        CHECK(fc.rho.hi == 0.8);
        CHECK(fc.rounds == 9);
        CHECK(fc.algorithm == Algorithm::kLocal);
        CHECK(fc.seed == 42);
        CHECK(fc.dims.input == 16);
        CHECK(fc.dims.k_cs == 5);
        CHECK(fc.dims.k_g == 6);
        CHECK(fc.dims.classes == 4);
        CHECK(fc.dims.hidden == std::vector<int>{32, 16});
        CHECK(fc.dims.idm_hidden == std::vector<int>{8, 8});
        CHECK(fc.lr == 0.002);
        CHECK(fc.batch_size == 25);
        CHECK(fc.mask.ratio == 0.3);
        CHECK(fc.mask.mode == MaskMode::kPatch);
        CHECK(fc.mask.patch_edge == 2);
        CHECK(fc.idm_mode == IdmMode::kJoint);
    }
    SUBCASE("ablation names") {
        for (auto [name, abl] : {std::pair{"none", Ablation::kNone},
                                 {"r0", Ablation::kR0},
                                 {"no_mcsl", Ablation::kNoMcsl},
                                 {"no_id", Ablation::kNoId}}) {
            ExperimentConfig cfg;
            cfg.set("federation.ablation", name);
            CHECK(cfg.to_federation_config().ablation == abl);
        }
    }
    SUBCASE("bad values throw") {
        auto bad = [](const std::string& key, const std::string& value) {
            ExperimentConfig cfg;
            cfg.set(key, value);
            CHECK_THROWS_AS(cfg.to_federation_config(), ConfigError);
        };
        bad("data.classes", "six");
        bad("data.classes", "6x");
        bad("train.lr", "fast");
        bad("federation.reset_opt_on_broadcast", "maybe");
        bad("model.hidden", "32,ten");
        bad("federation.algorithm", "fedprox");
        bad("federation.ablation", "r1");
        bad("train.mask_mode", "rows");
        bad("train.idm_mode", "either");
        bad("partition.kind", "uniform");
        bad("data.kind", "csv");
        bad("federation.join_ratio", "half");
    }
    SUBCASE("idx kind requires both paths") {
        ExperimentConfig cfg;
        cfg.set("data.kind", "idx");
        CHECK_THROWS_AS(cfg.to_federation_config(), ConfigError);
    }
    SUBCASE("out-of-range values fail validation") {
        ExperimentConfig cfg;
        cfg.set("train.mask_ratio", "1.0");
        CHECK_THROWS_AS(cfg.to_federation_config(), DataError);
        ExperimentConfig cfg2;
        cfg2.set("federation.join_ratio", "0.0");
        CHECK_THROWS_AS(cfg2.to_federation_config(), DataError);
    }
}

TEST_CASE("config echo") {
    auto cfg = parse("[train]\nlr = 0.25\n[federation]\nclients = 3\n");
    const std::string echo = cfg.echo();
    SUBCASE("every known key is explicit") {
        for (const auto& key : ExperimentConfig::known_keys()) {
            const auto dot = key.find('.');
            CHECK(echo.find("[" + key.substr(0, dot) + "]") != std::string::npos);
            CHECK(echo.find("\n" + key.substr(dot + 1) + " = ") !=
                  std::string::npos);
        }
    }
    SUBCASE("set values survive, defaults fill the rest") {
        CHECK(echo.find("lr = 0.25") != std::string::npos);
        CHECK(echo.find("clients = 3") != std::string::npos);
        CHECK(echo.find("batch_size = 100") != std::string::npos);
    }
    SUBCASE("echo is a parse fixed point") {
        ExperimentConfig round = parse(echo);
        CHECK(round.echo() == echo);
    }
    SUBCASE("echo reproduces the same federation config") {
        FederationConfig a = cfg.to_federation_config();
        FederationConfig b = parse(echo).to_federation_config();
        CHECK(a.lr == b.lr);
        CHECK(a.clients == b.clients);
        CHECK(a.data.blob_spread == b.data.blob_spread);
        CHECK(a.seed == b.seed);
    }
}

TEST_CASE("metrics csv") {
    std::vector<RoundReport> reports(2);
    for (int t = 0; t < 2; ++t) {
        reports[t].round = t;
        for (int c = 0; c < 2; ++c) {
            ClientRoundMetrics m;
            m.client_id = c;
            m.train_acc = 0.5 + t;
            m.test_acc = 0.25 + c;
            m.loss_recon = 1.5;
            m.loss_cls = 0.125;
            m.comm_up = 10;
            m.comm_down = 20;
            // loss_id stays NaN for client 1
            if (c == 0) m.loss_id = -0.5;
            reports[t].clients.push_back(m);
        }
    }
    const std::string csv = metrics_csv(reports);
    std::istringstream is(csv);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);

    CHECK(lines[0] ==
          "round,client_id,split,accuracy,loss_recon,loss_id,loss_cls,comm_up,"
          "comm_down");
    CHECK(lines.size() == 1 + 2 * 2 * 2);  // rounds x clients x splits
    CHECK(lines[1] == "0,0,train,0.5,1.5,-0.5,0.125,10,20");
    CHECK(lines[2] == "0,0,test,0.25,1.5,-0.5,0.125,10,20");
    CHECK(lines[3] == "0,1,train,0.5,1.5,nan,0.125,10,20");
    CHECK(lines[5] == "1,0,train,1.5,1.5,-0.5,0.125,10,20");
    SUBCASE("empty report list yields only the header") {
        const std::string empty = metrics_csv({});
        CHECK(empty.find('\n') == empty.size() - 1);
    }
}
