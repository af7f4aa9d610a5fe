#include <doctest.h>

#include <cmath>

#include "lqsep/evaluation.hpp"
#include "lqsep/ngram.hpp"
#include "support.hpp"

using namespace lqsep;
using lqsep::test::Gen;

TEST_CASE("SDR reference cases") {
    Gen g(1);
    const Eigen::VectorXd r = g.matrix(64, 1);
    CHECK(sdr(r, r) == kSdrCapDb);
    CHECK(std::abs(sdr(Eigen::VectorXd(0.5 * r), r) - 10.0 * std::log10(4.0)) < 1e-12);
    CHECK(sdr(Eigen::VectorXd(0.5 * r), r) == doctest::Approx(6.021).epsilon(1e-4));
    CHECK_THROWS_AS(sdr(r, Eigen::VectorXd::Zero(64)), ValidationError);
    CHECK_THROWS_AS(sdr(Eigen::VectorXd::Zero(3), r), DimensionError);
}

TEST_CASE("mixture baseline with orthogonal equal-energy sources") {
    const Eigen::VectorXd x1{{1.0, 0.0, -1.0, 0.0, 0.5, 0.0}};
    const Eigen::VectorXd x2{{0.0, 1.0, 0.0, 0.5, 0.0, -1.0}};
    REQUIRE(x1.dot(x2) == 0.0);
    const EvalPair pair = EvalPair::make({x1, 8000}, {x2, 8000}, "c");
    // Residual x1 - m = (x1 - x2) / 2 has energy |x1|^2 / 2.
    CHECK(std::abs(sdr(pair.m, pair.x1) - 10.0 * std::log10(2.0)) < 1e-9);
    CHECK(std::abs(sdr(pair.m, pair.x2) - 10.0 * std::log10(2.0)) < 1e-9);
}

namespace {

struct SmallRun {
    LqVae codec{test::tiny_codec_config()};
    SumCodeTable table;
    NgramPrior p1{4, 2, 16}, p2{4, 2, 16};
    std::vector<EvalPair> pairs;

    SmallRun() {
        Gen g(2);
        codec.set_codebook(g.codebook(4, 2, 0.3));
        table = SumCodeTable(codec.codebook());
        p1 = NgramPrior::fit(g.corpus(4, 6, 16), 2, 16);
        p2 = NgramPrior::fit(g.corpus(4, 6, 16), 2, 16);
        for (int i = 0; i < 5; ++i) pairs.push_back(EvalPair::make(g.chunk(32), g.chunk(32), "c" + std::to_string(i)));
        pairs.push_back(EvalPair::make({Eigen::VectorXd::Zero(32), 8000}, g.chunk(32), "silent"));
    }

    std::vector<SDRReport> run(std::vector<double> alphas) const {
        EvalConfig cfg;
        cfg.separation = {0.1, 6, 4};
        cfg.alphas = std::move(alphas);
        return evaluate_run(pairs, codec, table, p1, p2, cfg);
    }
};

}  // namespace

TEST_CASE("evaluation run") {
    const SmallRun run;
    const std::vector<SDRReport> reports = run.run({0.0, 0.5, 1.0});
    REQUIRE(reports.size() == 3);
    for (const SDRReport& r : reports) {
        REQUIRE(r.chunks.size() == 6);
        for (const ChunkResult& c : r.chunks) {
            if (c.chunk_id == "silent") {
                CHECK(c.error.has_value());
                continue;
            }
            REQUIRE_FALSE(c.error.has_value());
            for (int s = 0; s < 2; ++s) {
                CHECK(c.sdr[1][s] >= c.sdr[0][s]);
                CHECK(std::isfinite(c.sdr[2][s]));
            }
        }
        CHECK(r.aggregate(EvalMode::mixture, 0).count == 5);
        CHECK(r.to_json()["errors"].size() == 1);
    }
    // Candidates and oracle picks are shared across alphas.
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(reports[0].chunks[i].oracle_index[0] == reports[2].chunks[i].oracle_index[0]);
        CHECK(reports[0].chunks[i].sdr[2][1] == reports[2].chunks[i].sdr[2][1]);
    }
    CHECK_FALSE(reports[0].chunks[0].sigma_rej.has_value());
    CHECK(reports[2].chunks[0].sigma_rej.has_value());
}

TEST_CASE("reports are deterministic") {
    const SmallRun run;
    const SDRReport a = run.run({0.5}).front(), b = run.run({0.5}).front();
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(a.to_csv() == b.to_csv());
    const std::string csv = a.to_csv();
    CHECK(csv.rfind("chunk,source,mode,sdr_db\n", 0) == 0);
    CHECK(csv.find("\nmean,1,rejection,") != std::string::npos);
    CHECK(csv.find("\nmedian,2,mixture,") != std::string::npos);
}

TEST_CASE("aggregates") {
    SDRReport r;
    for (double v : {1.0, 5.0, 3.0, 10.0}) {
        ChunkResult c;
        c.sdr[0][0] = v;
        r.chunks.push_back(c);
    }
    ChunkResult failed;
    failed.error = "boom";
    failed.sdr[0][0] = 1e9;
    r.chunks.push_back(failed);
    const Aggregate a = r.aggregate(EvalMode::rejection, 0);
    CHECK(a.count == 4);
    CHECK(a.mean == 4.75);
    CHECK(a.median == 4.0);
}
