#include <gtest/gtest.h>

#include <algorithm>

#include "soupkit/error.hpp"
#include "soupkit/rng.hpp"
#include "soupkit/soup.hpp"

using namespace soup;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.layers = 2;
    c.d_model = 8;
    c.heads = 2;
    c.context = 8;
    c.vocab = 256;
    c.bottleneck = 3;
    return c;
}

const BaseModel& shared_base() {
    static const BaseModel base = init_base(small_config());
    return base;
}

AdapterWeights random_adapter(const std::string& domain, std::uint64_t seed, std::uint64_t init_seed = 1) {
    auto a = attach_adapters(shared_base(), init_seed);
    a.meta.domain = domain;
    Rng rng(seed);
    for (auto& p : a.params) {
        for (auto& v : p.value.data()) v = static_cast<float>(rng.normal());
    }
    return a;
}

AdapterWeights two_element(const std::string& domain, float x, float y) {
    AdapterWeights a;
    a.config = small_config();
    a.meta.domain = domain;
    a.meta.base_hash = "b";
    a.params.push_back({"t", Tensor<float>({2}, {x, y})});
    return a;
}

}  // namespace

TEST(Average, SingleMemberIsBitwiseIdentity) {
    Registry reg;
    auto a = random_adapter("a", 1);
    const auto id = reg.add(a);
    auto out = average_adapters(uniform_recipe({id}), reg);
    EXPECT_EQ(out.params, a.params);
}

TEST(Average, OppositeAdaptersCancel) {
    Registry reg;
    auto a = random_adapter("a", 2);
    auto b = a;
    b.meta.domain = "b";
    for (auto& p : b.params) {
        for (auto& v : p.value.data()) v = -v;
    }
    auto out = average_adapters(uniform_recipe({reg.add(a), reg.add(b)}), reg);
    for (const auto& p : out.params) {
        for (float v : p.value.data()) EXPECT_EQ(v, 0.0f);
    }
}

TEST(Average, ThreeWayHandArithmetic) {
    Registry reg;
    const auto i1 = reg.add(two_element("a", 1, 2));
    const auto i2 = reg.add(two_element("b", 3, 4));
    const auto i3 = reg.add(two_element("c", 5, 6));
    auto out = average_adapters(uniform_recipe({i1, i2, i3}), reg);
    ASSERT_EQ(out.params.size(), 1u);
    EXPECT_EQ(out.params[0].value.vec(), (std::vector<float>{3.0f, 4.0f}));
    // Explicit equal weights take the weighted path and still land on [3, 4].
    SoupRecipe r;
    r.ids = {i1, i2, i3};
    r.coefficients = {0.5, 0.25, 0.25};
    auto w = average_adapters(r, reg);
    const float ex = static_cast<float>(0.5 * 1 + 0.25 * 3 + 0.25 * 5);
    EXPECT_EQ(w.params[0].value[0], ex);
}

TEST(Average, PermutationInvariantBitwise) {
    Registry reg;
    std::vector<std::string> ids;
    for (int i = 0; i < 5; ++i) ids.push_back(reg.add(random_adapter("d" + std::to_string(i), 10 + i)));
    auto ref = average_adapters(uniform_recipe(ids), reg);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        rng.shuffle(ids);
        EXPECT_EQ(average_adapters(uniform_recipe(ids), reg).params, ref.params);
    }
}

TEST(Average, IdenticalMembersReturnThatAdapter) {
    Registry reg;
    auto a = random_adapter("a", 5);
    std::vector<std::string> ids;
    for (int i = 0; i < 7; ++i) {
        auto copy = a;
        copy.meta.domain = "copy" + std::to_string(i);
        ids.push_back(reg.add(copy));
    }
    EXPECT_EQ(average_adapters(uniform_recipe(ids), reg).params, a.params);
}

TEST(Average, ConvexityBoundProperty) {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        Registry reg;
        const int l = 1 + static_cast<int>(rng.below(6));
        SoupRecipe r;
        double total = 0;
        for (int i = 0; i < l; ++i) {
            r.ids.push_back(reg.add(random_adapter("d" + std::to_string(i), 1000 * trial + i)));
            r.coefficients.push_back(0.1 + rng.uniform());
            total += r.coefficients.back();
        }
        for (auto& c : r.coefficients) c /= total;
        double sum = 0;
        for (auto c : r.coefficients) sum += c;
        if (std::abs(sum - 1.0) > 1e-9) continue;
        auto out = average_adapters(r, reg);
        for (std::size_t t = 0; t < out.params.size(); ++t) {
            for (std::size_t k = 0; k < out.params[t].value.size(); ++k) {
                float lo = 1e30f, hi = -1e30f;
                for (const auto& id : r.ids) {
                    const float v = reg.get(id).params[t].value[k];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                ASSERT_GE(out.params[t].value[k], lo);
                ASSERT_LE(out.params[t].value[k], hi);
            }
        }
    }
}

TEST(Average, IncompatibleMembersNeedOverride) {
    Registry reg;
    const auto a = reg.add(random_adapter("a", 1, 1));
    const auto b = reg.add(random_adapter("b", 2, 2));
    EXPECT_THROW(average_adapters(uniform_recipe({a, b}), reg), CompatibilityError);
    auto out = average_adapters(uniform_recipe({a, b}), reg, true);
    EXPECT_TRUE(out.meta.provenance.at("unsafe_override").get<bool>());
}

TEST(Average, RecordsRecipeInProvenance) {
    Registry reg;
    const auto a = reg.add(random_adapter("a", 1));
    auto r = uniform_recipe({a}, "cluster", "novel0");
    auto out = average_adapters(r, reg);
    EXPECT_EQ(out.meta.provenance.at("recipe").at("method"), "cluster");
    EXPECT_EQ(out.meta.domain, "soup:novel0");
    EXPECT_NO_THROW(check_compatible(shared_base(), out));
}

TEST(UniformSoup, TwentyOneDomains) {
    Registry reg;
    for (int i = 0; i < 21; ++i) reg.add(random_adapter("d" + std::to_string(i), 100 + i));
    auto r = uniform_soup(reg);
    ASSERT_EQ(r.size(), 21u);
    for (double c : r.coefficients) EXPECT_EQ(c, 1.0 / 21.0);
    EXPECT_EQ(r.method, "uniform");
    EXPECT_TRUE(validate_recipe(r, reg).empty());
    auto filtered = uniform_soup(reg, std::set<std::string>{"d1", "d2"});
    EXPECT_EQ(filtered.size(), 2u);
}

TEST(UniformSoup, SingleAdapterAndEmpty) {
    Registry reg;
    EXPECT_THROW(uniform_soup(reg), ConfigError);
    auto a = random_adapter("only", 4);
    reg.add(a);
    EXPECT_EQ(average_adapters(uniform_soup(reg), reg).params, a.params);
}

TEST(UniformSoup, MixedSeedsListOffenders) {
    Registry reg;
    for (int i = 0; i < 3; ++i) reg.add(random_adapter("good" + std::to_string(i), i, 1));
    reg.add(random_adapter("stray", 9, 2));
    try {
        uniform_soup(reg);
        FAIL();
    } catch (const CompatibilityError& e) {
        EXPECT_NE(std::string(e.what()).find("stray"), std::string::npos);
        EXPECT_EQ(std::string(e.what()).find("good"), std::string::npos);
    }
}

TEST(Validate, ReportsEachViolation) {
    Registry reg;
    const auto a = reg.add(random_adapter("a", 1));
    const auto b = reg.add(random_adapter("b", 2));
    EXPECT_TRUE(validate_recipe(uniform_recipe({a, b}), reg).empty());

    SoupRecipe bad = uniform_recipe({a, b});
    bad.coefficients = {0.45, 0.45};
    auto issues = validate_recipe(bad, reg);
    ASSERT_EQ(issues.size(), 1u);
    EXPECT_EQ(issues[0].kind, "normalization");

    auto other = random_adapter("c", 3);
    other.meta.base_hash = "different";
    const auto c = reg.add(other);
    issues = validate_recipe(uniform_recipe({a, c}), reg);
    ASSERT_EQ(issues.size(), 1u);
    EXPECT_EQ(issues[0].kind, "base-hash");

    EXPECT_EQ(validate_recipe(SoupRecipe{}, reg)[0].kind, "empty");
    EXPECT_EQ(validate_recipe(uniform_recipe({"zzz"}), reg)[0].kind, "unknown-id");
}

TEST(Recipe, JsonRoundTrip) {
    auto r = uniform_recipe({"x", "y"}, "cosine", "novel1");
    r.selection["threshold"] = 0.15;
    auto back = recipe_from_json(to_json(r));
    EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
}
