#include <cmath>

#include "bmt/config.hpp"
#include "bmt/experiments.hpp"
#include "doctest.h"

using namespace bmt;

TEST_CASE("flat config text with comments and overrides") {
  RunConfig c = RunConfig::parse(
      "# toy run\n"
      "d_model = 32\n"
      "sites=w_qkv,w_out,w_ffn\n"
      "\n"
      "schedule = 100:none,100:w\n"
      "lr=0.003\n"
      "d_model=48\n"
      "vocab_size=20\n"
      "task=reverse\n");
  CHECK(c.model.d_model == 48);
  CHECK(c.model.sites.w_ffn);
  CHECK_FALSE(c.model.sites.a_ffn);
  CHECK(c.schedule.total_steps() == 200);
  CHECK(c.train.base_lr == 0.003);
  CHECK(c.model.vocab_size == 20);
  CHECK(c.task.vocab_size == 20);
  CHECK(c.task.task == TaskKind::kReverse);
  c.set("seed=9");
  CHECK(c.train.seed == 9);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(RunConfig::parse("colour=blue"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("d_model=big"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("d_model=8x"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("kd=maybe"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("just words"), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), ConfigError);
  RunConfig c;
  c.set("max_len", "40");
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("resolved config text round-trips") {
  RunConfig c;
  c.set("scale_mode", "fixed");
  c.set("scale", "12.5");
  c.set("adam_eps", "1e-9");
  c.set("teacher", "t.bmt");
  const std::string text = c.str();
  CHECK(RunConfig::parse(text).str() == text);
  CHECK(text.find("scale=12.5\n") != std::string::npos);
  CHECK(text.find("adam_eps=1e-09\n") != std::string::npos);
}

TEST_CASE("experiment helpers") {
  CHECK(parse_double_list("1, 8,64") == std::vector<double>{1, 8, 64});
  CHECK(parse_int_list("2,3") == std::vector<int>{2, 3});
  CHECK_THROWS_AS(parse_int_list("2,x"), ConfigError);
  CHECK(split_list("none,ln+shortcut,") == std::vector<std::string>{"none", "ln+shortcut"});
  CHECK(AttentionVariant::parse("ln+shortcut").shortcut);
  CHECK(AttentionVariant::parse("scale").mode == ScaleMode::kFixed);
  CHECK_THROWS_AS(AttentionVariant::parse("bn"), ConfigError);
  CHECK_THROWS_AS(ablate_attention(RunConfig{}, {"none", "bogus"}), ConfigError);

  RunConfig no_ffn;
  CHECK_THROWS_AS(sweep_scale_factor(no_ffn, {1, 2}), ConfigError);

  const ScalingPoint p = ladder_counts(TransformerConfig{}, 3, 5);
  TransformerConfig c;
  c.encoder_layers = 3;
  c.decoder_layers = 5;
  CHECK(p.n_enc == static_cast<double>(count_params(c).encoder));
  CHECK(p.n_dec == static_cast<double>(count_params(c).decoder));
}

TEST_CASE("sweep records failures and keeps going") {
  RunConfig c = scale_sweep_preset();
  c.model.encoder_layers = c.model.decoder_layers = 1;
  c.model.d_model = 8;
  c.model.d_ff = 16;
  c.model.n_heads = 2;
  c.task.n_train = 50;
  c.task.n_eval = 10;
  c.task.max_len = 5;
  c.train.batch_size = 4;
  c.schedule = QuantSchedule::parse("3:wa");
  const auto rows = sweep_scale_factor(c, {-1, 8});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].s == -1);
  CHECK_FALSE(rows[0].error.empty());
  CHECK(rows[1].error.empty());
  CHECK(std::isfinite(rows[1].final_eval_loss));
  const std::string csv = sweep_csv(rows);
  CHECK(csv.rfind("s,final_train_loss,final_eval_loss\n-1,nan,nan\n8,", 0) == 0);
}
