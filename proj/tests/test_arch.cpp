#include "doctest.h"
#include "gatecraft/arch.hpp"
#include "gatecraft/errors.hpp"

using namespace gatecraft;
using nlohmann::json;

TEST_CASE("toy descriptor shape") {
    const auto d = toy_descriptor();
    REQUIRE(d.conv_layers.size() == 3);
    CHECK(d.conv_layers[0] == ConvLayerSpec{1, 16, 5, 3});
    CHECK(d.hidden == 32);
    CHECK(d.transformer_layers.size() == 2);
    CHECK(d.sample_rate == 1000);
    // 400 -> (400-5)/3+1 = 132 -> (132-3)/2+1 = 65 -> (65-3)/2+1 = 32
    CHECK(conv_lengths(d, 400) == std::vector<std::size_t>{132, 65, 32});
    CHECK(frame_count(d, 400) == 32);
    CHECK(frame_count(d, 4) == 0);
}

TEST_CASE("wav2vec2-base frame count at 10 s") {
    const auto d = wav2vec2_base_descriptor();
    CHECK(samples_for(d, 10.0) == 160000);
    // 160000 -> 31999 -> 15999 -> 7999 -> 3999 -> 1999 -> 999 -> 499
    CHECK(conv_lengths(d, 160000) ==
          std::vector<std::size_t>{31999, 15999, 7999, 3999, 1999, 999, 499});
}

TEST_CASE("JSON round trip") {
    for (const auto& d : {toy_descriptor(), wav2vec2_base_descriptor()}) {
        const auto doc = to_json(d);
        CHECK(arch_from_json(json::parse(doc.dump())) == d);
    }
    const auto doc = to_json(toy_descriptor());
    CHECK(doc.contains("sample_rate"));
    CHECK(doc["conv_layers"][0].contains("in"));
    CHECK(doc["transformer_layers"][1].contains("ffn_intermediate"));
    CHECK_FALSE(doc.contains("pos_conv"));
}

TEST_CASE("JSON errors name the field") {
    auto doc = to_json(toy_descriptor());
    doc["conv_layers"][1]["kernel"] = 0;
    try {
        arch_from_json(doc);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "conv_layers[1].kernel");
    }

    doc = to_json(toy_descriptor());
    doc["conv_layers"][2]["in"] = 7;
    try {
        arch_from_json(doc);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "conv_layers[2].in");
    }

    doc = to_json(toy_descriptor());
    doc.erase("hidden");
    CHECK_THROWS_AS(arch_from_json(doc), ConfigError);
    doc = to_json(toy_descriptor());
    doc["transformer_layers"][0]["heads"] = "four";
    CHECK_THROWS_AS(arch_from_json(doc), ConfigError);
    CHECK_THROWS_AS(arch_from_json(json::array()), ConfigError);
}
