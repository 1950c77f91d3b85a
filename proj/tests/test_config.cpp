#include <catch2/catch_amalgamated.hpp>

#include "gdsd/config.hpp"

using namespace gdsd;

TEST_CASE("config parsing handles comments, blanks, and whitespace") {
    const std::string text =
        "# experiment\n"
        "command = train\n"
        "\n"
        "trainer.psi = 5.0   # guidance\n"
        "  task.id = mini_countdown\n";
    const auto entries = parse_config_text(text);
    REQUIRE(entries.size() == 3);
    const RunConfig cfg = resolve_config(entries, {});
    REQUIRE(cfg.command == Command::train);
    REQUIRE(cfg.trainer.psi == Catch::Approx(5.0));
    REQUIRE(cfg.task.id == TaskId::mini_countdown);
}

TEST_CASE("unknown keys are rejected with the key and line") {
    const auto entries = parse_config_text("command = train\ntrainer.psy = 1.0\n");
    try {
        resolve_config(entries, {});
        FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("trainer.psy") != std::string::npos);
        REQUIRE(msg.find("line 2") != std::string::npos);
    }
}

TEST_CASE("malformed lines name their line number") {
    try {
        parse_config_text("command = train\nthis is not a pair\n");
        FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("bad values name the key") {
    const auto entries = parse_config_text("trainer.psi = fast\n");
    REQUIRE_THROWS_WITH(resolve_config(entries, {}),
                        Catch::Matchers::ContainsSubstring("trainer.psi"));
}

TEST_CASE("overrides win over file entries") {
    const auto entries = parse_config_text("seed = 3\ntrainer.steps = 100\n");
    const std::vector<ConfigEntry> overrides{{"trainer.steps", "7", 0}};
    const RunConfig cfg = resolve_config(entries, overrides);
    REQUIRE(cfg.seed == 3);
    REQUIRE(cfg.trainer.total_steps == 7);
    REQUIRE(cfg.trainer.seed == 3);  // seed propagates into the trainer config
}

TEST_CASE("the resolved echo materializes every key") {
    const RunConfig cfg = resolve_config({}, {});
    const std::string echo = render_resolved_config(cfg);
    for (const char* key :
         {"command", "seed", "out", "emit_plot_data", "task.id", "task.vocab",
          "trainer.objective", "trainer.psi", "trainer.beta", "trainer.k", "trainer.mu",
          "trainer.group_size", "trainer.prompts_per_step", "trainer.learning_rate",
          "trainer.max_grad_norm", "trainer.steps", "trainer.weight_schedule",
          "trainer.coupled_masks", "trainer.masking", "decode.steps", "decode.temperature",
          "decode.selection", "tim.samples"}) {
        INFO(key);
        REQUIRE(echo.find(std::string(key) + " = ") != std::string::npos);
    }
    // the echo itself parses back with no unknown keys
    const auto entries = parse_config_text(echo);
    REQUIRE_NOTHROW(resolve_config(entries, {}));
}

TEST_CASE("metric records serialize with a fixed key order") {
    StepMetrics m;
    m.step = 3;
    m.reward_mean = 0.5;
    m.loss_total = 1.25;
    m.loss_match = 1.0;
    m.loss_reg = 0.25;
    m.grad_norm = 0.2;
    m.old_refresh = true;
    REQUIRE(metrics_json_line(m) ==
            "{\"step\":3,\"reward_mean\":0.5,\"loss_total\":1.25,\"loss_match\":1,"
            "\"loss_reg\":0.25,\"grad_norm\":0.2,\"old_refresh\":true}");
}
