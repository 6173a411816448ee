#include <doctest.h>

#include "gfmid/dsr.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace gfmid;
using namespace gfmid::dsr;
using doctest::Approx;

namespace {

TokenSet small_set() {
    return TokenSet({Op::add, Op::sub, Op::mul, Op::div, Op::sin, Op::cos}, {"x1", "x2", "x3"});
}

Expression expr_of(const TokenSet& ts, std::initializer_list<const char*> names,
                   std::vector<double> constants = {}) {
    Expression e;
    for (const char* n : names) e.tokens.push_back(ts.token(n));
    e.constants = std::move(constants);
    return e;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = u(rng);
    return m;
}

int unary_depth(const Node& n, const TokenSet& ts, int chain, int& worst) {
    const int here = ts.arity(n.token) == 1 ? chain + 1 : 0;
    worst = std::max(worst, here);
    for (const auto& c : n.children) unary_depth(c, ts, here, worst);
    return worst;
}

bool constants_well_placed(const Node& n, const TokenSet& ts) {
    const int c = ts.const_token();
    if (n.children.size() == 1 && n.children[0].token == c) return false;
    if (n.children.size() == 2 && n.children[0].token == c && n.children[1].token == c) {
        return false;
    }
    for (const auto& ch : n.children) {
        if (!constants_well_placed(ch, ts)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("token set layout") {
    const auto ts = small_set();
    CHECK(ts.size() == 10);
    CHECK(ts.name(0) == "+");
    CHECK(ts.arity(ts.token("sin")) == 1);
    CHECK(ts.arity(ts.token("/")) == 2);
    CHECK(ts.variable_index(ts.token("x2")) == 1);
    CHECK(ts.const_token() == 9);
    CHECK(ts.is_variable(ts.token("x3")));
    CHECK_FALSE(ts.is_variable(ts.const_token()));
    CHECK(TokenSet::standard().size() == 6 + 12 + 1);
    CHECK_THROWS_AS(TokenSet({Op::add}, {"a", "a"}), std::invalid_argument);
    CHECK_THROWS_AS((void)parse_op("^"), std::invalid_argument);
}

TEST_CASE("forced policy yields its only sequence") {
    const TokenSet ts({Op::add}, {"x1", "x2"});   // ids: + 0, x1 1, x2 2, const 3
    PolicyNet p(ts.size(), 3, 1);
    auto& w = p.parameters();
    w.setZero();
    const int H = 3;
    const int C = p.context_width();
    const int none = ts.size();
    auto wx = [&](int row, int col) -> double& { return w(col * H + row); };
    auto bh = [&](int row) -> double& { return w(static_cast<Eigen::Index>(p.offset_b_h()) + row); };
    // Hidden unit 0: root slot. Unit 1: first child of '+'. Unit 2: after sibling x1.
    wx(0, none) = 20.0;
    wx(1, 0) = 10.0;
    wx(1, C + none) = 10.0;
    bh(1) = -15.0;
    wx(2, C + 1) = 20.0;
    bh(2) = -10.0;
    p.w_o()(0, 0) = 50.0;
    p.w_o()(1, 1) = 50.0;
    p.w_o()(2, 2) = 50.0;

    std::mt19937_64 rng(5);
    for (int k = 0; k < 100; ++k) {
        const auto tr = sample_expression(p, ts, Constraints{}, rng);
        REQUIRE(tr.tokens == std::vector<int>{0, 1, 2});
    }
    Eigen::MatrixXd row(1, 2);
    row << 0.3, 0.7;
    const auto e = evaluate(Expression{{0, 1, 2}, {}}, ts, row);
    REQUIRE(e.valid);
    CHECK(e.values(0) == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("10000 samples are complete and respect every mask") {
    const auto ts = TokenSet::standard();
    const PolicyNet p(ts.size(), 32, 11);
    const Constraints c;
    std::mt19937_64 rng(3);
    int bad = 0;
    std::size_t longest = 0;
    for (int k = 0; k < 10000; ++k) {
        const auto tr = sample_expression(p, ts, c, rng);
        const Expression e{tr.tokens, {}};
        bad += !is_complete(tr.tokens, ts);
        bad += static_cast<int>(tr.tokens.size()) > c.max_length;
        bad += e.const_count(ts) > c.max_constants;
        const Node root = decode(tr.tokens, ts);
        bad += encode(root) != tr.tokens;
        int chain = 0;
        bad += unary_depth(root, ts, 0, chain) > c.max_unary_chain;
        bad += !constants_well_placed(root, ts);
        longest = std::max(longest, tr.tokens.size());
    }
    CHECK(bad == 0);
    MESSAGE("longest sample " << longest);
}

TEST_CASE("tight length budgets force terminals") {
    const auto ts = small_set();
    const PolicyNet p(ts.size(), 8, 2);
    std::mt19937_64 rng(9);
    for (int len : {1, 2, 3, 5}) {
        for (int k = 0; k < 500; ++k) {
            const auto tr = sample_expression(p, ts, Constraints{len, 2, 5}, rng);
            REQUIRE(static_cast<int>(tr.tokens.size()) <= len);
            REQUIRE(is_complete(tr.tokens, ts));
        }
    }
}

TEST_CASE("masked distribution sums to one") {
    const auto ts = small_set();
    const PolicyNet p(ts.size(), 16, 4);
    SequenceState st(ts, Constraints{});
    st.push(ts.token("sin"));
    st.push(ts.token("sin"));
    const auto mask = st.mask();
    CHECK_FALSE(mask[static_cast<std::size_t>(ts.token("cos"))]);
    CHECK_FALSE(mask[static_cast<std::size_t>(ts.const_token())]);
    const auto s = policy_step(p, Eigen::VectorXd::Zero(16), st.parent(), st.sibling(), mask);
    CHECK(s.probs.sum() == Approx(1.0).epsilon(1e-12));
    CHECK(s.probs(ts.token("sin")) == 0.0);
    CHECK(s.probs(ts.token("x1")) > 0.0);
}

TEST_CASE("sampling is seeded") {
    const auto ts = TokenSet::standard();
    const PolicyNet p(ts.size(), 32, 1);
    auto draw = [&](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::vector<std::vector<int>> out;
        for (int k = 0; k < 50; ++k) out.push_back(sample_expression(p, ts, {}, rng).tokens);
        return out;
    };
    CHECK(draw(4) == draw(4));
    CHECK(draw(4) != draw(5));
    CHECK(PolicyNet(ts.size(), 32, 1).parameters() == p.parameters());
}

TEST_CASE("decode, encode and infix") {
    const auto ts = small_set();
    const auto e = expr_of(ts, {"+", "*", "const", "x1", "sin", "x2"}, {2.5});
    CHECK(encode(decode(e.tokens, ts)) == e.tokens);
    CHECK(to_infix(e, ts) == "((2.5 * x1) + sin(x2))");
    CHECK(to_infix(Expression{e.tokens, {}}, ts) == "((c * x1) + sin(x2))");
    CHECK_THROWS_AS((void)decode({ts.token("+"), ts.token("x1")}, ts), std::invalid_argument);
    CHECK_THROWS_AS((void)decode({ts.token("x1"), ts.token("x2")}, ts), std::invalid_argument);
    CHECK_FALSE(is_complete({ts.token("x1"), ts.token("x2")}, ts));
    CHECK(is_complete({ts.token("x1")}, ts));
}

TEST_CASE("evaluation examples") {
    const auto ts = small_set();
    Eigen::MatrixXd row(1, 3);
    row << 0.3, 0.7, 0.0;
    const auto sum = evaluate(expr_of(ts, {"+", "x1", "x2"}), ts, row);
    REQUIRE(sum.valid);
    CHECK(sum.values(0) == Approx(1.0).epsilon(1e-15));

    row << 0.0, 1.0, 1.0;
    CHECK_FALSE(evaluate(expr_of(ts, {"/", "const", "x1"}, {1.0}), ts, row).valid);

    const auto vars = random_matrix(100, 3, 1);
    const auto scaled = evaluate(expr_of(ts, {"*", "const", "x3"}, {2.5}), ts, vars);
    REQUIRE(scaled.valid);
    CHECK(scaled.values == (2.5 * vars.col(2).array()).matrix());

    // Operand order of non-commutative operators.
    const auto diff = evaluate(expr_of(ts, {"-", "x1", "/", "x2", "x3"}), ts, vars);
    CHECK((diff.values.array() - (vars.col(0).array() - vars.col(1).array() / vars.col(2).array()))
              .abs()
              .maxCoeff() == 0.0);

    CHECK_THROWS_AS((void)evaluate(expr_of(ts, {"*", "const", "x3"}), ts, vars),
                    std::invalid_argument);
}

TEST_CASE("reward") {
    const auto ts = small_set();
    const auto vars = random_matrix(200, 3, 2);
    const RewardTarget rt(vars.col(0));
    CHECK(rt.reward(evaluate(expr_of(ts, {"x1"}), ts, vars)) == 1.0);

    Evaluation mean_pred{Eigen::VectorXd::Constant(200, vars.col(0).mean()), true};
    CHECK(rt.reward(mean_pred) == Approx(0.5).epsilon(1e-12));
    CHECK(rt.reward(Evaluation{}) == 0.0);
    CHECK_THROWS_AS(RewardTarget(Eigen::VectorXd::Constant(10, 3.0)), std::invalid_argument);

    std::mt19937_64 rng(8);
    const PolicyNet p(ts.size(), 16, 8);
    int out_of_range = 0;
    for (int k = 0; k < 2000; ++k) {
        Expression e{sample_expression(p, ts, {}, rng).tokens, {}};
        e.constants.assign(static_cast<std::size_t>(e.const_count(ts)), 0.7);
        const double r = rt.reward(evaluate(e, ts, vars));
        out_of_range += !(r >= 0.0 && r <= 1.0);
    }
    CHECK(out_of_range == 0);
}

TEST_CASE("constant optimization against least-squares oracles") {
    const auto ts = small_set();
    const auto vars = random_matrix(300, 3, 3);
    const Eigen::VectorXd x1 = vars.col(0);

    const RewardTarget y3(3.0 * x1);
    const auto c = optimize_constants(expr_of(ts, {"*", "const", "x1"}), ts, vars, y3, {});
    const double oracle = x1.dot(3.0 * x1) / x1.dot(x1);
    REQUIRE(c.constants.size() == 1);
    CHECK(std::abs(c.constants[0] - oracle) < 1e-6);

    const Eigen::VectorXd y = 2.0 * x1.array() + 5.0;
    const auto affine =
        optimize_constants(expr_of(ts, {"+", "*", "const", "x1", "const"}), ts, vars,
                           RewardTarget(y), {});
    Eigen::MatrixXd a(300, 2);
    a.col(0) = x1;
    a.col(1).setOnes();
    const Eigen::Vector2d ne = (a.transpose() * a).ldlt().solve(a.transpose() * y);
    REQUIRE(affine.constants.size() == 2);
    CHECK(std::abs(affine.constants[0] - ne(0)) < 1e-4);
    CHECK(std::abs(affine.constants[1] - ne(1)) < 1e-4);

    const auto none = expr_of(ts, {"+", "x1", "x2"});
    CHECK(optimize_constants(none, ts, vars, y3, {}) == none);
}

TEST_CASE("risk filter") {
    std::vector<double> r;
    for (int k = 1; k <= 10; ++k) r.push_back(0.1 * k);
    auto f = risk_filter(r, 0.2);
    CHECK(f.retained == std::vector<std::size_t>{8, 9});
    CHECK(f.threshold == r[8]);

    f = risk_filter(std::vector<double>(7, 0.4), 0.05);
    CHECK(f.retained.size() == 7);
    CHECK(risk_filter(r, 1.0).retained.size() == 10);

    // Ties at the threshold are all kept.
    f = risk_filter({0.2, 0.9, 0.5, 0.9, 0.9}, 0.2);
    CHECK(f.retained == std::vector<std::size_t>{1, 3, 4});
    CHECK_THROWS_AS((void)risk_filter({}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS((void)risk_filter(r, 0.0), std::invalid_argument);
}

TEST_CASE("zero advantage leaves only the entropy gradient") {
    const auto ts = small_set();
    const PolicyNet p(ts.size(), 8, 6);
    std::mt19937_64 rng(2);
    const auto tr = sample_expression(p, ts, {}, rng);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p.parameters().size());
    (void)accumulate_gradient(p, tr, 0.0, 0.0, g);
    CHECK(g.isZero(0.0));

    Eigen::VectorXd ent = Eigen::VectorXd::Zero(g.size());
    (void)accumulate_gradient(p, tr, 0.0, 0.01, ent);
    PolicyNet a = p;
    PolicyNet b = p;
    Adam adam_a(static_cast<std::size_t>(g.size()), 1e-3);
    Adam adam_b(static_cast<std::size_t>(g.size()), 1e-3);
    REQUIRE(policy_update(a, adam_a, {tr, tr}, {0.7, 0.7}, 0.7, 0.01));
    adam_b.step(b.parameters(), ent);
    CHECK(a.parameters() == b.parameters());
}

TEST_CASE("positive advantage raises the sequence log-probability") {
    const auto ts = small_set();
    PolicyNet p(ts.size(), 16, 7);
    std::mt19937_64 rng(1);
    for (int k = 0; k < 5; ++k) {
        const auto tr = sample_expression(p, ts, {}, rng);
        const double before = score(p, tr).log_prob;
        Adam adam(static_cast<std::size_t>(p.parameters().size()), 1e-4);
        REQUIRE(policy_update(p, adam, {tr}, {0.9}, 0.4, 0.0));
        CHECK(score(p, tr).log_prob > before);
    }
}

TEST_CASE("analytic gradients match central differences") {
    const auto ts = small_set();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        PolicyNet p(ts.size(), 4, seed);
        std::mt19937_64 rng(seed);
        SampleTrace tr = sample_expression(p, ts, {}, rng);
        while (tr.tokens.size() < 3) tr = sample_expression(p, ts, {}, rng);

        for (const auto& [w_lp, w_h] : {std::pair{1.0, 0.0}, std::pair{0.0, 1.0}}) {
            Eigen::VectorXd analytic = Eigen::VectorXd::Zero(p.parameters().size());
            (void)accumulate_gradient(p, tr, w_lp, w_h, analytic);
            auto objective = [&](const PolicyNet& q) {
                const auto s = score(q, tr);
                return w_lp * s.log_prob + w_h * s.entropy;
            };
            Eigen::VectorXd numeric(analytic.size());
            const double h = 1e-6;
            for (Eigen::Index k = 0; k < analytic.size(); ++k) {
                PolicyNet up = p;
                PolicyNet down = p;
                up.parameters()(k) += h;
                down.parameters()(k) -= h;
                numeric(k) = (objective(up) - objective(down)) / (2.0 * h);
            }
            const double rel = (analytic - numeric).cwiseAbs().maxCoeff() /
                               numeric.cwiseAbs().maxCoeff();
            MESSAGE("seed " << seed << " weights (" << w_lp << ", " << w_h << ") relative error "
                            << rel);
            CHECK(rel < 1e-5);
        }
    }
}

TEST_CASE("training bookkeeping and determinism") {
    const auto ts = small_set();
    const auto vars = random_matrix(100, 3, 4);
    // Noise keeps the reward below 1 so every epoch runs.
    const Eigen::VectorXd y = vars.col(0).array().sin() + vars.col(1).array() +
                              0.1 * random_matrix(100, 1, 9).col(0).array();
    DsrConfig cfg;
    cfg.batch_size = 50;
    cfg.epochs = 8;
    cfg.seed = 3;
    const auto a = train(vars, y, ts, cfg);
    const auto b = train(vars, y, ts, cfg);
    CHECK(a.best == b.best);
    CHECK(a.best_trace == b.best_trace);
    CHECK(a.epochs_run == 8);
    REQUIRE(a.best_trace.size() == 8);
    for (std::size_t k = 1; k < a.best_trace.size(); ++k) {
        CHECK(a.best_trace[k] >= a.best_trace[k - 1]);
    }
    const RewardTarget rt(y);
    CHECK(rt.reward(evaluate(a.best, ts, vars)) == a.best_reward);

    const auto json = to_json(a, ts);
    CHECK(expression_from_json(json, ts) == a.best);
    CHECK_FALSE(json.contains("runtime_s"));

    cfg.seed = 4;
    CHECK(train(vars, y, ts, cfg).best_trace != a.best_trace);

    cfg.epochs = 0;
    const auto baseline = train(vars, y, ts, cfg);
    CHECK(baseline.epochs_run == 0);
    CHECK(baseline.best_trace.size() == 1);
    CHECK(baseline.best_reward > 0.0);

    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("recovers x1*x2 + x3") {
    const TokenSet ts({Op::add, Op::sub, Op::mul, Op::sin, Op::cos}, {"x1", "x2", "x3"});
    int hits = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto vars = random_matrix(200, 3, seed + 100);
        const Eigen::VectorXd y = vars.col(0).cwiseProduct(vars.col(1)) + vars.col(2);
        DsrConfig cfg;
        cfg.seed = seed;
        cfg.epochs = 50;
        cfg.stop_reward = 0.999;
        const auto r = train(vars, y, ts, cfg);
        MESSAGE("seed " << seed << ": reward " << r.best_reward << " after " << r.epochs_run
                        << " epochs, " << to_infix(r.best, ts));
        hits += r.best_reward >= 0.999;
    }
    CHECK(hits >= 4);
}
