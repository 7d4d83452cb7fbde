#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ccpo/checkpoint.hpp"
#include "ccpo/config.hpp"
#include "ccpo/error.hpp"

using namespace ccpo;

TEST_SUITE("config") {
  TEST_CASE("key = value parsing") {
    const KeyValues kvs = parse_key_values("# run\nalpha = 0.2\n\n  method=cpo   # trailing\nsynthetic.seed = 9\n");
    REQUIRE(kvs.size() == 3);
    CHECK(kvs[0] == std::pair<std::string, std::string>{"alpha", "0.2"});
    CHECK(kvs[1].second == "cpo");
    try {
      parse_key_values("alpha = 0.1\nbroken line\n");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(parse_key_values(" = 3"), ParseError);
  }

  TEST_CASE("settings apply and reject bad input with the key name") {
    AppConfig c;
    apply_setting(c, "alpha", "0.25");
    apply_setting(c, "delta", "0.02");
    apply_setting(c, "price_guide_out", "0.002");
    apply_setting(c, "calibrator_mode", "paper-literal");
    apply_setting(c, "bound_mode", "literal");
    apply_setting(c, "synthetic.num_traces", "123");
    CHECK(c.run.alpha == 0.25);
    CHECK(c.run.trust_region.delta == 0.02);
    CHECK(c.run.prices.guide_out == 0.002);
    CHECK(c.run.calibrator_mode == CalibratorMode::PaperLiteral);
    CHECK(c.run.bound_mode == BoundMode::Literal);
    CHECK(c.data.synthetic.num_traces == 123);
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"alpha", "abc"}, {"no_such_key", "1"}, {"method", "sac"}, {"bound_mode", "tight"}, {"seed", "-1"},
             {"iterations", "1.5"}}) {
      try {
        apply_setting(c, k, v);
        FAIL("expected a validation error for " << k);
      } catch (const ValidationError& e) {
        CHECK(e.field() == k);
      }
    }
  }

  TEST_CASE("overrides, seeds and horizon") {
    CHECK(split_override("alpha=0.3") == std::pair<std::string, std::string>{"alpha", "0.3"});
    CHECK_THROWS_AS(split_override("alpha"), ValidationError);
    AppConfig c = load_config({}, {{"seed", "17"}, {"horizon", "3"}});
    CHECK(c.data.synthetic.seed == 17);
    CHECK(c.data.synthetic.horizon == 3);
    c = load_config({}, {{"synthetic.seed", "5"}, {"seed", "17"}});
    CHECK(c.data.synthetic.seed == 5);
    CHECK_THROWS_AS(load_config({}, {{"alpha", "2"}}), ValidationError);
    CHECK_THROWS_AS(load_config({}, {{"synthetic.horizon", "3"}}), ValidationError);
  }

  TEST_CASE("config file is read then overridden") {
    const auto path = std::filesystem::temp_directory_path() / "ccpo_test.conf";
    std::ofstream(path) << "alpha = 0.2\niterations = 7\n";
    const AppConfig c = load_config(path, {{"iterations", "9"}});
    CHECK(c.run.alpha == 0.2);
    CHECK(c.run.iterations == 9);
    std::filesystem::remove(path);
    CHECK_THROWS(load_config(path));
  }

  TEST_CASE("every documented key is accepted") {
    const auto keys = config_keys();
    CHECK(keys.size() > 40);
    CHECK(std::find(keys.begin(), keys.end(), "synthetic.unsolvable_fraction") != keys.end());
  }

  TEST_CASE("checkpoint round trip keeps everything evaluation needs") {
    SyntheticConfig sc;
    sc.num_traces = 40;
    const auto traces = generate_synthetic(sc).traces;
    RunConfig rc;
    rc.width = 6;
    rc.depth = 1;
    rc.batch_size = 3;
    rc.iterations = 2;
    rc.seed = 9;
    TrainResult r = run_ccpo(rc, std::span(traces).first(30), std::span(traces).subspan(30));
    r.fixed_rule = FixedThresholdRule{0.1, 0.7};
    const Checkpoint ck = make_checkpoint(r, rc);
    const Checkpoint back = parse_checkpoint(serialize_checkpoint(ck));
    CHECK(back.result.state.policy.values == r.state.policy.values);
    CHECK(back.result.state.critics.constraint.values == r.state.critics.constraint.values);
    CHECK(back.result.state.calibrator.kappa == r.state.calibrator.kappa);
    CHECK(back.result.state.calibrator.k == r.state.calibrator.k);
    CHECK(back.result.state.rng == r.state.rng);
    CHECK(back.result.state.iteration == 2);
    CHECK(back.result.kappa == r.kappa);
    CHECK(back.result.calibration.required == r.calibration.required);
    CHECK(back.result.fixed_rule->hi == 0.7);
    CHECK(back.seed == 9);
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));

    const auto path = std::filesystem::temp_directory_path() / "ccpo_ck.json";
    save_checkpoint(path, ck);
    CHECK(serialize_checkpoint(load_checkpoint(path)) == serialize_checkpoint(ck));
    std::filesystem::remove(path);

    RunConfig other = rc;
    other.horizon = 3;
    CHECK_THROWS_AS(check_compatible(ck, other), ValidationError);
    CHECK_NOTHROW(check_compatible(ck, rc));
  }

  TEST_CASE("malformed checkpoints") {
    CHECK_THROWS_AS(parse_checkpoint("{nope"), ParseError);
    CHECK_THROWS_AS(parse_checkpoint(R"({"format":"other"})"), ValidationError);
    CHECK_THROWS_AS(parse_checkpoint(R"({"format":"ccpo-checkpoint","version":99})"), ValidationError);
    CHECK_THROWS_AS(parse_checkpoint(R"({"format":"ccpo-checkpoint","version":1})"), ValidationError);
  }

  TEST_CASE("calibration report json") {
    CalibrationReport r;
    r.kappa = 0.25;
    r.n = 200;
    r.required = 181;
    const std::string s = calibration_report_json(r);
    CHECK(s.find("\"required\":181") != std::string::npos);
    CHECK(s.find("\"kappa\":0.25") != std::string::npos);
  }
}
