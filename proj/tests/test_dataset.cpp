#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "latent_hazard/latent_hazard.hpp"
#include "test_support.hpp"

using namespace lh;

namespace {

Schema small_schema() { return load_schema(lh_test::source_path("tests/fixtures/small_schema.json")); }

Schema disability_schema() {
    return Schema({categorical_spec("employer_arr_qual", VariableRole::policy_key,
                                    {{"1", "Fully on-site"}, {"2", "Hybrid"}, {"3", "Fully remote"}}),
                   categorical_spec("disability_qual", VariableRole::wfh_related,
                                    {{"1", "Yes"}, {"2", "No"}, {"3", "Prefer not to answer"}}, 0)});
}

// Rows reconstructed from the published cross-tabulation of policy by disability.
Dataset disability_data() {
    const int counts[3][3] = {{1603, 4359, 49}, {937, 4104, 90}, {332, 2394, 53}};
    std::size_t n = 0;
    for (const auto& row : counts)
        for (int c : row) n += static_cast<std::size_t>(c);
    Dataset d(disability_schema(), n);
    std::size_t i = 0;
    for (int p = 0; p < 3; ++p)
        for (int level = 0; level < 3; ++level)
            for (int k = 0; k < counts[p][level]; ++k, ++i) {
                d.set(i, 0, p);
                d.set(i, 1, level);
            }
    return d;
}

}  // namespace

TEST(Dataset, LoadsFixtureWithLabelsAndMissingCells) {
    const Dataset d = load_csv(lh_test::source_path("tests/fixtures/small.csv"), small_schema());
    ASSERT_EQ(d.rows(), 3u);
    ASSERT_EQ(d.cols(), 3u);
    EXPECT_EQ(d.label(0, 1), "Female");
    EXPECT_EQ(d.label(2, 1), "Male");
    EXPECT_TRUE(d.missing(1, 2));
    EXPECT_EQ(d.missing_count(), 1u);
    EXPECT_DOUBLE_EQ(d.value(2, 0), 3.25);
}

TEST(Dataset, AcceptsCategoryValuesAndLabels) {
    std::istringstream in("score,gender,hours\n1,1,2\n2,Male,3\n");
    const Dataset d = read_csv(in, small_schema());
    EXPECT_EQ(d.label(0, 1), "Female");
    EXPECT_EQ(d.label(1, 1), "Male");
}

TEST(Dataset, RejectsUnknownCategory) {
    std::istringstream in("score,gender,hours\n1,Other,2\n");
    EXPECT_THROW(read_csv(in, small_schema()), SchemaError);
}

TEST(Dataset, RejectsMissingColumn) {
    std::istringstream in("score,gender\n1,Male\n");
    EXPECT_THROW(read_csv(in, small_schema()), SchemaError);
}

TEST(Dataset, RejectsNonNumericCell) {
    std::istringstream in("score,gender,hours\nabc,Male,2\n");
    EXPECT_THROW(read_csv(in, small_schema()), SchemaError);
}

TEST(Dataset, MissingFileIsIoError) {
    EXPECT_THROW(load_csv("/nonexistent/file.csv", small_schema()), IoError);
    EXPECT_THROW(load_schema("/nonexistent/schema.json"), IoError);
}

TEST(Dataset, NaTokensAreConfigurable) {
    std::istringstream in("score,gender,hours\n.,Male,2\n");
    CsvOptions opts;
    opts.na_tokens = {"."};
    const Dataset d = read_csv(in, small_schema(), opts);
    EXPECT_TRUE(d.missing(0, 0));
}

TEST(Dataset, CsvRoundTripIsBitExact) {
    RandomStream rng(11, "roundtrip");
    Dataset d(small_schema(), 200);
    for (std::size_t i = 0; i < d.rows(); ++i) {
        d.set(i, 0, rng.normal() * 1e3 + 1e-7 * rng.uniform());
        d.set(i, 1, static_cast<double>(rng.below(2)));
        d.set(i, 2, std::exp(rng.normal()));
        for (std::size_t j = 0; j < 3; ++j)
            if (rng.bernoulli(0.2)) d.set_missing(i, j);
    }
    std::istringstream in(to_csv_text(d));
    const Dataset back = read_csv(in, d.schema());
    EXPECT_TRUE(back == d);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(back.mask_column(j), d.mask_column(j));
}

TEST(Dataset, SchemaRoundTripsThroughJson) {
    const Schema s = load_schema(lh_test::source_path("data/swaa_schema.json"));
    const Schema back = Schema::from_json(s.to_json());
    EXPECT_EQ(back.to_json(), s.to_json());
}

TEST(Dataset, SchemaValidationCatchesDuplicatesAndBadReferences) {
    EXPECT_THROW(Schema({continuous_spec("a", VariableRole::control), continuous_spec("a", VariableRole::control)}),
                 SchemaError);
    EXPECT_THROW(Schema({categorical_spec("c", VariableRole::control, {{"1", "x"}, {"2", "y"}}, 5)}), SchemaError);
    nlohmann::json doc = {{"variables", {{{"code", "c"}, {"kind", "categorical"}, {"role", "control"},
                                          {"categories", {"a", "b"}}, {"reference", "z"}}}}};
    EXPECT_THROW(Schema::from_json(doc), SchemaError);
    nlohmann::json bad_role = {{"variables", {{{"code", "c"}, {"kind", "continuous"}, {"role", "nope"}}}}};
    EXPECT_THROW(Schema::from_json(bad_role), SchemaError);
}

TEST(Dataset, SurveySchemaShape) {
    const Schema s = load_schema(lh_test::source_path("data/swaa_schema.json"));
    EXPECT_EQ(s.with_role(VariableRole::productivity_component).size(), 6u);
    EXPECT_EQ(s.with_role(VariableRole::firm_value).size(), 1u);
    EXPECT_EQ(s[s.index_of("workteam_npeople")].role, VariableRole::firm_value);
    const auto& dis = s[s.index_of("disability_qual")];
    EXPECT_EQ(dis.categories[dis.reference].label, "Yes");
    const auto& race = s[s.index_of("race_ethnicity")];
    EXPECT_EQ(race.categories[race.reference].label, "Black or African American");
    const auto& ind = s[s.index_of("work_industry")];
    EXPECT_EQ(ind.categories.size(), 18u);
    EXPECT_EQ(ind.categories[ind.reference].label, "Agriculture");
}

TEST(Encode, DummiesAgeSquaredAndOrder) {
    const Schema s = load_schema(lh_test::source_path("data/swaa_schema.json"));
    Dataset d(s, 4);
    RandomStream rng(3, "encode");
    for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) {
            const auto& spec = s[j];
            if (spec.kind == VariableKind::categorical)
                d.set(i, j, static_cast<double>(rng.below(spec.categories.size())));
            else if (spec.kind == VariableKind::binary)
                d.set(i, j, spec.binary_values[rng.below(2)]);
            else
                d.set(i, j, rng.normal() + 40);
        }
    const DesignMatrix dm = encode(d, {{VariableRole::demographic, VariableRole::control}});
    EXPECT_EQ(dm.names.front(), intercept_name);
    ASSERT_TRUE(dm.find("gender_Male"));
    EXPECT_FALSE(dm.find("gender_Female"));
    int industry = 0;
    for (const auto& n : dm.names)
        if (n.rfind("work_industry_", 0) == 0) ++industry;
    EXPECT_EQ(industry, 17);
    const auto age = dm.find("age_quant");
    const auto age2 = dm.find("Age2");
    ASSERT_TRUE(age && age2);
    EXPECT_EQ(*age2, *age + 1);
    for (Eigen::Index i = 0; i < dm.rows(); ++i) EXPECT_DOUBLE_EQ(dm.x(i, *age2), dm.x(i, *age) * dm.x(i, *age));
    const DesignMatrix again = encode(d, {{VariableRole::demographic, VariableRole::control}});
    EXPECT_EQ(again.names, dm.names);
    EXPECT_EQ(again.x, dm.x);
}

TEST(Encode, AllContinuousIsInterceptPlusColumns) {
    Schema s({continuous_spec("a", VariableRole::control), continuous_spec("b", VariableRole::control)});
    Dataset d(s, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        d.set(i, 0, static_cast<double>(i));
        d.set(i, 1, 2.0 * static_cast<double>(i) + 1);
    }
    const DesignMatrix dm = encode(d);
    EXPECT_EQ(dm.names, (std::vector<std::string>{intercept_name, "a", "b"}));
    EXPECT_DOUBLE_EQ(dm.x(2, 2), 5.0);
}

TEST(Encode, RefusesMissingCells) {
    const Dataset d = load_csv(lh_test::source_path("tests/fixtures/small.csv"), small_schema());
    EXPECT_THROW(encode(d), ConfigError);
}

TEST(Subsample, PublishedCountsAndDisabilityFrequencies) {
    const Dataset d = disability_data();
    EXPECT_EQ(d.rows(), 13921u);
    EXPECT_EQ(subsample(d, Policy::on_site).rows(), 6011u);
    EXPECT_EQ(subsample(d, Policy::fully_remote).rows(), 2779u);
    EXPECT_EQ(subsample(d, Policy::all).rows(), 13921u);

    const auto all = summarize(d).find_categorical("disability_qual");
    ASSERT_NE(all, nullptr);
    EXPECT_EQ(all->levels[0].frequency, 2872u);
    EXPECT_EQ(format_fixed(all->levels[0].percent, 3), "0.206");
    EXPECT_EQ(format_fixed(all->levels[1].cumulative, 3), "0.986");
    const auto on_site = summarize(subsample(d, Policy::on_site)).find_categorical("disability_qual");
    EXPECT_EQ(on_site->levels[0].frequency, 1603u);
    EXPECT_EQ(format_fixed(on_site->levels[0].percent, 3), "0.267");
    const auto remote = summarize(subsample(d, Policy::fully_remote)).find_categorical("disability_qual");
    EXPECT_EQ(format_fixed(remote->levels[1].percent, 3), "0.861");
}

TEST(Subsample, CountsSumToRowsWithObservedKey) {
    Dataset d = disability_data();
    RandomStream rng(5, "mask-key");
    std::size_t observed = 0;
    for (std::size_t i = 0; i < d.rows(); ++i) {
        if (rng.bernoulli(0.1))
            d.set_missing(i, 0);
        else
            ++observed;
    }
    const std::size_t total = subsample(d, Policy::on_site).rows() + subsample(d, Policy::hybrid).rows() +
                              subsample(d, Policy::fully_remote).rows();
    EXPECT_EQ(total, observed);
}

TEST(Subsample, MissingPolicyKeyIsSchemaError) {
    const Dataset d = load_csv(lh_test::source_path("tests/fixtures/small.csv"), small_schema());
    EXPECT_THROW(subsample(d, Policy::on_site), SchemaError);
    EXPECT_EQ(subsample(d, Policy::all).rows(), 3u);
}

TEST(Summarize, ForcedArithmetic) {
    Schema s({continuous_spec("x", VariableRole::control), continuous_spec("k", VariableRole::control)});
    Dataset d(s, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        d.set(i, 0, static_cast<double>(i + 1));
        d.set(i, 1, 7.0);
    }
    const auto sum = summarize(d);
    const auto x = sum.find_continuous("x");
    EXPECT_DOUBLE_EQ(x->mean, 2.0);
    EXPECT_DOUBLE_EQ(x->min, 1.0);
    EXPECT_DOUBLE_EQ(x->max, 3.0);
    EXPECT_DOUBLE_EQ(x->sd, 1.0);
    EXPECT_DOUBLE_EQ(sum.find_continuous("k")->sd, 0.0);
}

TEST(Summarize, IgnoresMissingCells) {
    const Dataset d = load_csv(lh_test::source_path("tests/fixtures/small.csv"), small_schema());
    const auto hours = summarize(d).find_continuous("hours");
    EXPECT_EQ(hours->n, 2u);
    EXPECT_DOUBLE_EQ(hours->mean, 8.5);
}

TEST(Table, MarkdownAndCsvRendering) {
    Table t{"Title", {"a", "b"}, {{"x", "1,234"}, {"y \"q\"", "2"}}};
    const std::string md = to_markdown(t);
    EXPECT_NE(md.find("### Title"), std::string::npos);
    EXPECT_NE(md.find("| :--- | ---: |"), std::string::npos);
    const std::string csv = to_csv(t);
    EXPECT_NE(csv.find("\"1,234\""), std::string::npos);
    EXPECT_NE(csv.find("\"y \"\"q\"\"\""), std::string::npos);
    EXPECT_EQ(format_grouped(13918), "13,918");
    EXPECT_EQ(format_grouped(-21990), "-21,990");
}

TEST(Random, StreamsAreReproducibleAndIndependent) {
    RandomStream a(42, "x"), b(42, "x"), c(42, "y");
    for (int i = 0; i < 100; ++i) {
        const auto va = a(), vb = b(), vc = c();
        EXPECT_EQ(va, vb);
        EXPECT_NE(va, vc);
    }
    RandomStream u(1, "moments");
    double s = 0, ss = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = u.normal();
        s += z;
        ss += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(ss / n, 1.0, 0.01);
}

TEST(Errors, StagePrefixKeepsKind) {
    const Error e = with_stage(NumericalError("singular"), "factor");
    EXPECT_EQ(e.kind(), ErrorKind::numerical);
    EXPECT_EQ(e.exit_code(), 3);
    EXPECT_STREQ(e.what(), "[factor] singular");
}
