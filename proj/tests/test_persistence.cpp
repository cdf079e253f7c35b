#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "danp/checkpoint.hpp"
#include "danp/config.hpp"

using namespace danp;
using nlohmann::json;

namespace {

Checkpoint small_checkpoint() {
    Checkpoint ck;
    ck.config.model.d_r = 8;
    ck.config.model.det_hidden = 16;
    ck.config.model.det_layers = 1;
    ck.config.model.det_heads = 2;
    ck.config.model.lat_hidden = 8;
    ck.config.model.lat_layers = 1;
    ck.config.model.lat_mlp_hidden = 8;
    ck.config.train.seed = 17;
    ck.params = init_params<float>(ck.config.model, 17);
    ck.rng_state = Rng(5).state();
    ck.step = 123;
    return ck;
}

std::string config_error_field(const std::string& text) {
    try {
        run_config_from_json(json::parse(text));
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "";
}

}  // namespace

TEST_CASE("run config JSON") {
    SUBCASE("round trip with defaults filled in") {
        RunConfig c;
        c.model.d_r = 16;
        c.model.fixed_dims = FixedDims{2, 1};
        c.model.enable_dab = false;
        c.train.clip_norm = 1.0;
        c.scenario.kind = ScenarioKind::zero_shot;
        c.scenario.train_dims = {2, 3};
        c.scenario.families = {KernelFamily::rbf, KernelFamily::matern52};
        c.io.curve = "c.csv";
        const json j = run_config_to_json(c);
        CHECK(run_config_from_json(j) == c);
        CHECK(run_config_from_json(json::object()) == RunConfig{});
        CHECK_FALSE(j["train"].contains("threads"));
    }
    SUBCASE("errors name the dotted path") {
        CHECK(config_error_field(R"({"model": {"d_rr": 8}})") == "model.d_rr");
        CHECK(config_error_field(R"({"train": {"base_lr": "fast"}})") == "train.base_lr");
        CHECK(config_error_field(R"({"scenario": {"kernels": ["rbf", "cosine"]}})") == "scenario.kernels");
        CHECK(config_error_field(R"({"scenario": {"train_dims": [0]}})") == "scenario.train_dims");
        CHECK(config_error_field(R"({"model": {"fixed_dims": {"d_z": 1}}})") == "model.fixed_dims.d_z");
        CHECK(config_error_field(R"({"extra": 1})") == "extra");
        CHECK(config_error_field(R"({"train": {"total_steps": -3}})") == "train.total_steps");
    }
    SUBCASE("validation") {
        RunConfig c;
        c.model.enable_dab = false;
        try {
            c.validate();
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(e.field() == "fixed_dims");
        }
    }
    SUBCASE("parse errors carry the position") {
        const std::string path = "persistence_bad_config.json";
        std::ofstream(path) << "{\n  \"model\": {\"d_r\": 8,,}\n}\n";
        try {
            load_run_config(path);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
        std::remove(path.c_str());
        CHECK_THROWS_AS(load_run_config("no/such/config.json"), ConfigError);
    }
}

TEST_CASE("checkpoint round trip") {
    const Checkpoint ck = small_checkpoint();
    const std::string bytes = serialize_checkpoint(ck);
    CHECK(bytes.compare(0, 8, "DANPCKPT") == 0);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(back == ck);
    CHECK(serialize_checkpoint(back) == bytes);
    for (const auto& [key, t] : ck.params) {
        const auto& u = back.params.at(key);
        CHECK(std::memcmp(t.data().data(), u.data().data(), t.numel() * sizeof(float)) == 0);
    }

    const std::string path = "persistence_roundtrip.ckpt";
    save_checkpoint(path, ck);
    CHECK(load_checkpoint(path) == ck);
    std::remove(path.c_str());

    std::uint64_t meta_len = 0;
    std::memcpy(&meta_len, bytes.data() + 12, 8);
    const json meta = json::parse(bytes.substr(20, meta_len));
    std::vector<std::string> keys;
    for (const auto& e : meta.at("params")) keys.push_back(e.at("key"));
    CHECK(std::is_sorted(keys.begin(), keys.end()));
    CHECK(meta.at("step") == 123);
}

TEST_CASE("checkpoint corruption") {
    const std::string bytes = serialize_checkpoint(small_checkpoint());
    SUBCASE("bad magic") {
        std::string b = bytes;
        b[0] = 'X';
        try {
            parse_checkpoint(b);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(std::string(e.what()).find("not a DANP checkpoint") != std::string::npos);
        }
    }
    SUBCASE("future version") {
        std::string b = bytes;
        const std::uint32_t v = 999;
        std::memcpy(b.data() + 8, &v, 4);
        try {
            parse_checkpoint(b);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(std::string(e.what()).find("999") != std::string::npos);
        }
    }
    SUBCASE("truncated payload") {
        const std::string b = bytes.substr(0, bytes.size() - 10);
        try {
            parse_checkpoint(b);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(std::string(e.what()).find("offset") != std::string::npos);
        }
        CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 15)), CheckpointError);
    }
    CHECK_THROWS_AS(load_checkpoint("no/such/file.ckpt"), CheckpointError);
}
