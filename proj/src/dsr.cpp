#include "gfmid/dsr.hpp"

#include "gfmid/plant.hpp"

#include <tbb/parallel_for.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace gfmid::dsr {

const char* to_string(Op op) noexcept {
    switch (op) {
        case Op::add: return "+";
        case Op::sub: return "-";
        case Op::mul: return "*";
        case Op::div: return "/";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
    }
    return "?";
}

Op parse_op(const std::string& s) {
    for (Op op : {Op::add, Op::sub, Op::mul, Op::div, Op::sin, Op::cos}) {
        if (s == to_string(op)) return op;
    }
    throw std::invalid_argument("unknown operator '" + s + "' (expected + - * / sin cos)");
}

int arity(Op op) noexcept {
    return op == Op::sin || op == Op::cos ? 1 : 2;
}

TokenSet::TokenSet(std::vector<Op> operators, std::vector<std::string> variables)
    : ops_(std::move(operators)), variables_(std::move(variables)) {
    if (variables_.empty()) {
        throw std::invalid_argument("token set needs at least one variable");
    }
    std::set<Op> seen_ops(ops_.begin(), ops_.end());
    if (seen_ops.size() != ops_.size()) {
        throw std::invalid_argument("duplicate operator in token set");
    }
    std::set<std::string> seen(variables_.begin(), variables_.end());
    if (seen.size() != variables_.size() || seen.count("const")) {
        throw std::invalid_argument("variable names must be unique and not 'const'");
    }
    for (Op op : ops_) {
        names_.emplace_back(to_string(op));
        arity_.push_back(gfmid::dsr::arity(op));
    }
    for (const auto& v : variables_) {
        names_.push_back(v);
        arity_.push_back(0);
    }
    names_.emplace_back("const");
    arity_.push_back(0);
}

TokenSet TokenSet::standard() {
    return TokenSet({Op::add, Op::sub, Op::mul, Op::div, Op::sin, Op::cos},
                    Dataset::variable_names());
}

int TokenSet::variable_token(const std::string& name) const {
    const auto it = std::find(variables_.begin(), variables_.end(), name);
    if (it == variables_.end()) throw std::invalid_argument("unknown variable '" + name + "'");
    return n_ops() + static_cast<int>(it - variables_.begin());
}

int TokenSet::op_token(Op op) const {
    const auto it = std::find(ops_.begin(), ops_.end(), op);
    if (it == ops_.end()) {
        throw std::invalid_argument(std::string("operator '") + to_string(op) +
                                    "' is not in the token set");
    }
    return static_cast<int>(it - ops_.begin());
}

int TokenSet::token(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw std::invalid_argument("unknown token '" + name + "'");
    return static_cast<int>(it - names_.begin());
}

int Expression::const_count(const TokenSet& ts) const {
    return static_cast<int>(std::count(tokens.begin(), tokens.end(), ts.const_token()));
}

bool is_complete(const std::vector<int>& tokens, const TokenSet& ts) {
    int open = 1;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
        if (tokens[k] < 0 || tokens[k] >= ts.size()) return false;
        open += ts.arity(tokens[k]) - 1;
        if (open == 0) return k + 1 == tokens.size();
    }
    return false;
}

namespace {

Node decode_at(const std::vector<int>& tokens, const TokenSet& ts, std::size_t& pos) {
    if (pos >= tokens.size()) {
        throw std::invalid_argument("token sequence ends before the tree is complete");
    }
    const int t = tokens[pos++];
    if (t < 0 || t >= ts.size()) throw std::invalid_argument("token id out of range");
    Node n{t, {}};
    for (int k = 0; k < ts.arity(t); ++k) n.children.push_back(decode_at(tokens, ts, pos));
    return n;
}

void encode_into(const Node& n, std::vector<int>& out) {
    out.push_back(n.token);
    for (const auto& c : n.children) encode_into(c, out);
}

std::string infix_of(const Node& n, const TokenSet& ts, const std::vector<double>& constants,
                     std::size_t& next_const) {
    if (n.token == ts.const_token()) {
        if (next_const < constants.size()) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.6g", constants[next_const++]);
            return buf;
        }
        ++next_const;
        return "c";
    }
    if (ts.is_variable(n.token)) return ts.name(n.token);
    if (n.children.size() == 1) {
        return ts.name(n.token) + "(" + infix_of(n.children[0], ts, constants, next_const) + ")";
    }
    const auto lhs = infix_of(n.children[0], ts, constants, next_const);
    const auto rhs = infix_of(n.children[1], ts, constants, next_const);
    return "(" + lhs + " " + ts.name(n.token) + " " + rhs + ")";
}

}  // namespace

Node decode(const std::vector<int>& tokens, const TokenSet& ts) {
    std::size_t pos = 0;
    Node root = decode_at(tokens, ts, pos);
    if (pos != tokens.size()) {
        throw std::invalid_argument("token sequence has trailing tokens after a complete tree");
    }
    return root;
}

std::vector<int> encode(const Node& root) {
    std::vector<int> out;
    encode_into(root, out);
    return out;
}

std::string to_infix(const Expression& expr, const TokenSet& ts) {
    std::size_t next = 0;
    return infix_of(decode(expr.tokens, ts), ts, expr.constants, next);
}

Evaluation evaluate(const Expression& expr, const TokenSet& ts, const Eigen::MatrixXd& variables) {
    if (variables.cols() != static_cast<Eigen::Index>(ts.variables().size())) {
        throw std::invalid_argument("variables matrix width does not match the token set");
    }
    if (!is_complete(expr.tokens, ts)) {
        throw std::invalid_argument("expression is not a complete pre-order sequence");
    }
    int next_const = expr.const_count(ts);
    if (static_cast<std::size_t>(next_const) != expr.constants.size()) {
        throw std::invalid_argument("expression constants are not populated");
    }
    const Eigen::Index n = variables.rows();
    std::vector<Eigen::ArrayXd> stack;
    stack.reserve(expr.tokens.size());
    Evaluation out;
    for (auto it = expr.tokens.rbegin(); it != expr.tokens.rend(); ++it) {
        const int t = *it;
        if (t == ts.const_token()) {
            stack.push_back(Eigen::ArrayXd::Constant(n, expr.constants[static_cast<std::size_t>(--next_const)]));
            continue;
        }
        if (ts.is_variable(t)) {
            stack.push_back(variables.col(ts.variable_index(t)).array());
            continue;
        }
        const Op op = ts.op(t);
        if (arity(op) == 1) {
            auto& a = stack.back();
            a = op == Op::sin ? a.sin().eval() : a.cos().eval();
        } else {
            Eigen::ArrayXd lhs = std::move(stack.back());
            stack.pop_back();
            auto& rhs = stack.back();
            switch (op) {
                case Op::add: rhs = lhs + rhs; break;
                case Op::sub: rhs = lhs - rhs; break;
                case Op::mul: rhs = lhs * rhs; break;
                default: rhs = lhs / rhs; break;
            }
        }
        if (!stack.back().allFinite()) {
            return out;
        }
    }
    if (!stack.back().allFinite()) return out;
    out.values = stack.back().matrix();
    out.valid = true;
    return out;
}

RewardTarget::RewardTarget(Eigen::VectorXd y) : y_(std::move(y)) {
    if (y_.size() == 0 || !y_.allFinite()) {
        throw std::invalid_argument("reward target must be nonempty and finite");
    }
    const double mean = y_.mean();
    std_ = std::sqrt((y_.array() - mean).square().mean());
    if (!(std_ > 0.0)) {
        throw std::invalid_argument("reward target has zero variance; the regression task is "
                                    "degenerate");
    }
}

double RewardTarget::nrmse(const Evaluation& e) const {
    if (!e.valid) return std::numeric_limits<double>::infinity();
    const double rmse = std::sqrt((e.values - y_).squaredNorm() / static_cast<double>(y_.size()));
    return std::isfinite(rmse) ? rmse / std_ : std::numeric_limits<double>::infinity();
}

double RewardTarget::reward(const Evaluation& e) const {
    const double v = nrmse(e);
    return std::isfinite(v) ? 1.0 / (1.0 + v) : 0.0;
}

namespace {

struct SimplexResult {
    Eigen::VectorXd x;
    double f = std::numeric_limits<double>::infinity();
};

template <class F>
SimplexResult nelder_mead(const F& objective, const Eigen::VectorXd& x0, int max_evals) {
    const auto n = x0.size();
    std::vector<Eigen::VectorXd> pts;
    std::vector<double> vals;
    int evals = 0;
    auto eval = [&](const Eigen::VectorXd& x) {
        ++evals;
        const double v = objective(x);
        return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
    };
    pts.push_back(x0);
    vals.push_back(eval(x0));
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd x = x0;
        x(i) += x0(i) != 0.0 ? 0.5 * std::abs(x0(i)) : 0.1;
        pts.push_back(x);
        vals.push_back(eval(x));
    }
    std::vector<std::size_t> order(pts.size());
    auto sort_simplex = [&] {
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
        std::vector<Eigen::VectorXd> p2;
        std::vector<double> v2;
        for (auto k : order) {
            p2.push_back(pts[k]);
            v2.push_back(vals[k]);
        }
        pts = std::move(p2);
        vals = std::move(v2);
    };

    const auto last = static_cast<std::size_t>(n);
    while (evals + static_cast<int>(n) + 2 <= max_evals) {
        sort_simplex();
        double size = 0.0;
        for (std::size_t k = 1; k <= last; ++k) {
            size = std::max(size, (pts[k] - pts[0]).cwiseAbs().maxCoeff());
        }
        if (size <= 1e-12 * (1.0 + pts[0].cwiseAbs().maxCoeff()) ||
            vals[last] - vals[0] <= 1e-15 * vals[0]) {
            break;
        }
        Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
        for (std::size_t k = 0; k < last; ++k) c += pts[k];
        c /= static_cast<double>(n);

        const Eigen::VectorXd xr = c + (c - pts[last]);
        const double fr = eval(xr);
        if (fr < vals[0]) {
            const Eigen::VectorXd xe = c + 2.0 * (c - pts[last]);
            const double fe = eval(xe);
            if (fe < fr) {
                pts[last] = xe;
                vals[last] = fe;
            } else {
                pts[last] = xr;
                vals[last] = fr;
            }
        } else if (fr < vals[last - 1]) {
            pts[last] = xr;
            vals[last] = fr;
        } else {
            const bool outside = fr < vals[last];
            const Eigen::VectorXd xc = outside ? Eigen::VectorXd(c + 0.5 * (xr - c))
                                               : Eigen::VectorXd(c + 0.5 * (pts[last] - c));
            const double fc = eval(xc);
            if (fc < std::min(fr, vals[last]) || (!outside && fc < vals[last])) {
                pts[last] = xc;
                vals[last] = fc;
            } else {
                for (std::size_t k = 1; k <= last; ++k) {
                    pts[k] = pts[0] + 0.5 * (pts[k] - pts[0]);
                    vals[k] = eval(pts[k]);
                }
            }
        }
    }
    sort_simplex();
    return {pts[0], vals[0]};
}

}  // namespace

Expression optimize_constants(Expression expr, const TokenSet& ts,
                              const Eigen::MatrixXd& variables, const RewardTarget& target,
                              const ConstOptConfig& cfg) {
    const int k = expr.const_count(ts);
    if (k == 0) {
        expr.constants.clear();
        return expr;
    }
    auto objective = [&](const Eigen::VectorXd& c) {
        expr.constants.assign(c.data(), c.data() + c.size());
        return target.nrmse(evaluate(expr, ts, variables));
    };
    static constexpr double seeds[] = {1.0, -1.0, 0.1};
    SimplexResult best;
    best.x = Eigen::VectorXd::Ones(k);
    for (int r = 0; r < cfg.restarts; ++r) {
        const auto res =
            nelder_mead(objective, Eigen::VectorXd::Constant(k, seeds[r % 3]), cfg.max_evals);
        if (res.f < best.f) best = res;
    }
    expr.constants.assign(best.x.data(), best.x.data() + best.x.size());
    return expr;
}

RiskFilter risk_filter(const std::vector<double>& rewards, double epsilon) {
    if (rewards.empty()) throw std::invalid_argument("risk filter needs a nonempty batch");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) {
        throw std::invalid_argument("epsilon must lie in (0, 1]");
    }
    std::vector<double> sorted = rewards;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const auto n = static_cast<double>(rewards.size());
    const auto keep = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(epsilon * n - 1e-9)), 1, rewards.size());
    RiskFilter out;
    out.threshold = sorted[keep - 1];
    for (std::size_t k = 0; k < rewards.size(); ++k) {
        if (rewards[k] >= out.threshold) out.retained.push_back(k);
    }
    return out;
}

PolicyNet::PolicyNet(int n_tokens, int hidden, std::uint64_t seed)
    : n_tokens_(n_tokens), hidden_(hidden) {
    if (n_tokens < 1 || hidden < 1) throw std::invalid_argument("policy sizes must be positive");
    const std::size_t total = offset_b_o() + static_cast<std::size_t>(n_tokens_);
    params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double a = 1.0 / std::sqrt(static_cast<double>(hidden_));
    auto fill = [&](std::size_t from, std::size_t to) {
        for (std::size_t k = from; k < to; ++k) params_(static_cast<Eigen::Index>(k)) = a * u(rng);
    };
    fill(0, offset_b_h());
    fill(offset_w_o(), offset_b_o());
}

std::size_t PolicyNet::offset_w_h() const noexcept {
    return static_cast<std::size_t>(hidden_) * 2 * static_cast<std::size_t>(context_width());
}
std::size_t PolicyNet::offset_b_h() const noexcept {
    return offset_w_h() + static_cast<std::size_t>(hidden_ * hidden_);
}
std::size_t PolicyNet::offset_w_o() const noexcept {
    return offset_b_h() + static_cast<std::size_t>(hidden_);
}
std::size_t PolicyNet::offset_b_o() const noexcept {
    return offset_w_o() + static_cast<std::size_t>(n_tokens_ * hidden_);
}

Eigen::Map<const Eigen::MatrixXd> PolicyNet::w_x() const {
    return {params_.data(), hidden_, 2 * context_width()};
}
Eigen::Map<const Eigen::MatrixXd> PolicyNet::w_h() const {
    return {params_.data() + offset_w_h(), hidden_, hidden_};
}
Eigen::Map<const Eigen::VectorXd> PolicyNet::b_h() const {
    return {params_.data() + offset_b_h(), hidden_};
}
Eigen::Map<const Eigen::MatrixXd> PolicyNet::w_o() const {
    return {params_.data() + offset_w_o(), n_tokens_, hidden_};
}
Eigen::Map<const Eigen::VectorXd> PolicyNet::b_o() const {
    return {params_.data() + offset_b_o(), n_tokens_};
}
Eigen::Map<Eigen::MatrixXd> PolicyNet::w_o() {
    return {params_.data() + offset_w_o(), n_tokens_, hidden_};
}
Eigen::Map<Eigen::VectorXd> PolicyNet::b_o() {
    return {params_.data() + offset_b_o(), n_tokens_};
}

SequenceState::SequenceState(const TokenSet& ts, const Constraints& c) : ts_(&ts), c_(c) {
    if (c.max_length < 1) throw std::invalid_argument("max_length must be >= 1");
}

int SequenceState::parent() const {
    return stack_.empty() ? -1 : stack_.back().token;
}

int SequenceState::sibling() const {
    return stack_.empty() || stack_.back().filled == 0 ? -1 : stack_.back().first_child;
}

std::vector<bool> SequenceState::mask() const {
    const int n = ts_->size();
    std::vector<bool> ok(static_cast<std::size_t>(n), false);
    const int budget = c_.max_length - static_cast<int>(tokens_.size()) - open_;
    const bool unary_blocked = !stack_.empty() && stack_.back().arity == 1 &&
                               stack_.back().unary_chain >= c_.max_unary_chain;
    const bool const_blocked =
        consts_ >= c_.max_constants ||
        (!stack_.empty() && (stack_.back().arity == 1 ||
                             (stack_.back().filled == 1 &&
                              stack_.back().first_child == ts_->const_token())));
    for (int t = 0; t < n; ++t) {
        const int a = ts_->arity(t);
        bool allowed = a <= budget;
        if (a == 1 && unary_blocked) allowed = false;
        if (t == ts_->const_token() && const_blocked) allowed = false;
        ok[static_cast<std::size_t>(t)] = allowed;
    }
    return ok;
}

void SequenceState::push(int token) {
    if (done()) throw std::logic_error("sequence is already complete");
    if (token < 0 || token >= ts_->size()) throw std::invalid_argument("token id out of range");
    started_ = true;
    tokens_.push_back(token);
    const int a = ts_->arity(token);
    open_ += a - 1;
    if (token == ts_->const_token()) ++consts_;
    if (!stack_.empty()) {
        auto& top = stack_.back();
        if (++top.filled == 1) top.first_child = token;
    }
    if (a > 0) {
        int chain = 0;
        if (a == 1) {
            chain = !stack_.empty() && stack_.back().arity == 1 ? stack_.back().unary_chain + 1 : 1;
        }
        stack_.push_back({token, a, 0, -1, chain});
    } else {
        while (!stack_.empty() && stack_.back().filled == stack_.back().arity) stack_.pop_back();
    }
}

namespace {

int context_column(int token, int n_tokens) {
    return token < 0 ? n_tokens : token;
}

}  // namespace

PolicyStep policy_step(const PolicyNet& p, const Eigen::VectorXd& h_prev, int parent, int sibling,
                    const std::vector<bool>& mask) {
    const int T = p.n_tokens();
    const auto wx = p.w_x();
    Eigen::VectorXd z = wx.col(context_column(parent, T)) +
                        wx.col(p.context_width() + context_column(sibling, T)) +
                        p.w_h() * h_prev + p.b_h();
    PolicyStep s;
    s.h = z.array().tanh().matrix();
    const Eigen::VectorXd logits = p.w_o() * s.h + p.b_o();
    double top = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < T; ++t) {
        if (mask[static_cast<std::size_t>(t)]) top = std::max(top, logits(t));
    }
    s.probs = Eigen::VectorXd::Zero(T);
    double sum = 0.0;
    for (int t = 0; t < T; ++t) {
        if (mask[static_cast<std::size_t>(t)]) {
            s.probs(t) = std::exp(logits(t) - top);
            sum += s.probs(t);
        }
    }
    s.probs /= sum;
    for (int t = 0; t < T; ++t) {
        const double q = s.probs(t);
        if (q > 0.0) s.entropy -= q * std::log(q);
    }
    return s;
}

SampleTrace sample_expression(const PolicyNet& policy, const TokenSet& ts, const Constraints& c,
                              std::mt19937_64& rng) {
    if (policy.n_tokens() != ts.size()) {
        throw std::invalid_argument("policy output size does not match the token set");
    }
    SequenceState st(ts, c);
    SampleTrace tr;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(policy.hidden());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    while (!st.done()) {
        const int parent = st.parent();
        const int sibling = st.sibling();
        auto mask = st.mask();
        const PolicyStep s = policy_step(policy, h, parent, sibling, mask);
        const double draw = u(rng);
        double acc = 0.0;
        int choice = -1;
        for (int t = 0; t < ts.size(); ++t) {
            if (!mask[static_cast<std::size_t>(t)]) continue;
            choice = t;
            acc += s.probs(t);
            if (draw < acc) break;
        }
        tr.tokens.push_back(choice);
        tr.parents.push_back(parent);
        tr.siblings.push_back(sibling);
        tr.masks.push_back(std::move(mask));
        st.push(choice);
        h = s.h;
    }
    return tr;
}

SampleTrace trace_of(const std::vector<int>& tokens, const TokenSet& ts, const Constraints& c) {
    SequenceState st(ts, c);
    SampleTrace tr;
    for (int t : tokens) {
        if (st.done()) throw std::invalid_argument("token sequence has trailing tokens");
        auto mask = st.mask();
        if (t < 0 || t >= ts.size() || !mask[static_cast<std::size_t>(t)]) {
            throw std::invalid_argument("token sequence violates the sampling constraints");
        }
        tr.tokens.push_back(t);
        tr.parents.push_back(st.parent());
        tr.siblings.push_back(st.sibling());
        tr.masks.push_back(std::move(mask));
        st.push(t);
    }
    if (!st.done()) throw std::invalid_argument("token sequence is incomplete");
    return tr;
}

SequenceScore score(const PolicyNet& policy, const SampleTrace& trace) {
    SequenceScore out;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(policy.hidden());
    for (std::size_t k = 0; k < trace.tokens.size(); ++k) {
        const PolicyStep s = policy_step(policy, h, trace.parents[k], trace.siblings[k], trace.masks[k]);
        out.log_prob += std::log(s.probs(trace.tokens[k]));
        out.entropy += s.entropy;
        h = s.h;
    }
    return out;
}

SequenceScore accumulate_gradient(const PolicyNet& policy, const SampleTrace& trace,
                                  double weight_lp, double weight_h, Eigen::VectorXd& grad) {
    const int T = policy.n_tokens();
    const int H = policy.hidden();
    const std::size_t steps = trace.tokens.size();
    std::vector<Eigen::VectorXd> hs(steps + 1, Eigen::VectorXd::Zero(H));
    std::vector<PolicyStep> outs;
    outs.reserve(steps);
    SequenceScore sc;
    for (std::size_t k = 0; k < steps; ++k) {
        outs.push_back(policy_step(policy, hs[k], trace.parents[k], trace.siblings[k],
                                   trace.masks[k]));
        hs[k + 1] = outs.back().h;
        sc.log_prob += std::log(outs.back().probs(trace.tokens[k]));
        sc.entropy += outs.back().entropy;
    }

    double* g = grad.data();
    Eigen::Map<Eigen::MatrixXd> g_wx(g, H, 2 * policy.context_width());
    Eigen::Map<Eigen::MatrixXd> g_wh(g + policy.offset_w_h(), H, H);
    Eigen::Map<Eigen::VectorXd> g_bh(g + policy.offset_b_h(), H);
    Eigen::Map<Eigen::MatrixXd> g_wo(g + policy.offset_w_o(), T, H);
    Eigen::Map<Eigen::VectorXd> g_bo(g + policy.offset_b_o(), T);
    const auto w_o = policy.w_o();
    const auto w_h = policy.w_h();

    Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(H);
    for (std::size_t k = steps; k-- > 0;) {
        const PolicyStep& s = outs[k];
        Eigen::VectorXd dlogit = Eigen::VectorXd::Zero(T);
        for (int t = 0; t < T; ++t) {
            const double p = s.probs(t);
            if (!trace.masks[k][static_cast<std::size_t>(t)] || p == 0.0) continue;
            // d log p_a / d logit_t = [t == a] - p_t
            // d H / d logit_t = -p_t (log p_t + H)
            dlogit(t) = weight_lp * ((t == trace.tokens[k] ? 1.0 : 0.0) - p) -
                        weight_h * p * (std::log(p) + s.entropy);
        }
        const Eigen::VectorXd& h = hs[k + 1];
        g_wo.noalias() += dlogit * h.transpose();
        g_bo += dlogit;
        const Eigen::VectorXd dh = w_o.transpose() * dlogit + dh_next;
        const Eigen::VectorXd dz = dh.array() * (1.0 - h.array().square());
        g_wx.col(context_column(trace.parents[k], T)) += dz;
        g_wx.col(policy.context_width() + context_column(trace.siblings[k], T)) += dz;
        g_wh.noalias() += dz * hs[k].transpose();
        g_bh += dz;
        dh_next = w_h.transpose() * dz;
    }
    return sc;
}

Adam::Adam(std::size_t n, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps),
      m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    params.array() += lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

bool policy_update(PolicyNet& policy, Adam& adam, const std::vector<SampleTrace>& retained,
                   const std::vector<double>& rewards, double threshold, double entropy_weight) {
    if (retained.empty() || retained.size() != rewards.size()) {
        throw std::invalid_argument("policy update needs matching nonempty retained set");
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(policy.parameters().size());
    const double n = static_cast<double>(retained.size());
    for (std::size_t k = 0; k < retained.size(); ++k) {
        (void)accumulate_gradient(policy, retained[k], (rewards[k] - threshold) / n,
                                  entropy_weight / n, grad);
    }
    if (!grad.allFinite()) return false;
    adam.step(policy.parameters(), grad);
    return true;
}

void DsrConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("dsr.batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("dsr.epochs must be >= 0");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) {
        throw std::invalid_argument("dsr.epsilon must lie in (0, 1]");
    }
    if (!(learning_rate > 0.0)) throw std::invalid_argument("dsr.learning_rate must be > 0");
    if (!(entropy_weight >= 0.0)) throw std::invalid_argument("dsr.entropy_weight must be >= 0");
    if (hidden < 1) throw std::invalid_argument("dsr.hidden must be >= 1");
    if (max_length < 1) throw std::invalid_argument("dsr.max_length must be >= 1");
    if (max_constants < 0) throw std::invalid_argument("dsr.max_constants must be >= 0");
    if (const_opt.restarts < 1) throw std::invalid_argument("dsr.const_opt.restarts must be >= 1");
    if (const_opt.max_evals < 1) {
        throw std::invalid_argument("dsr.const_opt.max_evals must be >= 1");
    }
    if (train_rows < 2) throw std::invalid_argument("dsr.train_rows must be >= 2");
    if (!(stop_reward > 0.0 && stop_reward <= 1.0)) {
        throw std::invalid_argument("dsr.stop_reward must lie in (0, 1]");
    }
    if (operators.empty()) throw std::invalid_argument("dsr.operators must not be empty");
}

std::vector<Eigen::Index> spread_rows(Eigen::Index rows, int count) {
    std::vector<Eigen::Index> out;
    if (count >= rows) {
        for (Eigen::Index r = 0; r < rows; ++r) out.push_back(r);
        return out;
    }
    for (int k = 0; k < count; ++k) {
        out.push_back(static_cast<Eigen::Index>(std::llround(
            static_cast<double>(k) * static_cast<double>(rows - 1) / (count - 1))));
    }
    return out;
}

TrainResult train(const Eigen::MatrixXd& variables, const Eigen::VectorXd& target,
                  const TokenSet& ts, const DsrConfig& cfg, const std::string& target_name) {
    cfg.validate();
    if (variables.rows() != target.size()) {
        throw std::invalid_argument("variables and target row counts differ");
    }
    const auto start = std::chrono::steady_clock::now();
    const auto rows = spread_rows(variables.rows(), cfg.train_rows);
    const Eigen::MatrixXd x = variables(rows, Eigen::all);
    const RewardTarget rt(target(rows));

    std::mt19937_64 rng(cfg.seed);
    PolicyNet policy(ts.size(), cfg.hidden, rng());
    Adam adam(static_cast<std::size_t>(policy.parameters().size()), cfg.learning_rate);
    const Constraints limits{cfg.max_length, 2, cfg.max_constants};

    struct Scored {
        Expression expr;
        double reward;
    };
    std::map<std::vector<int>, Scored> cache;

    TrainResult result;
    result.target = target_name;
    result.best_reward = -1.0;
    // With zero epochs one batch is scored and the policy is never updated.
    const int batches = std::max(cfg.epochs, 1);
    for (int epoch = 0; epoch < batches; ++epoch) {
        std::vector<SampleTrace> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(sample_expression(policy, ts, limits, rng));
        }

        std::vector<const std::vector<int>*> todo;
        std::set<std::vector<int>> queued;
        for (const auto& tr : batch) {
            if (!cache.count(tr.tokens) && queued.insert(tr.tokens).second) {
                todo.push_back(&tr.tokens);
            }
        }
        std::vector<Scored> fresh(todo.size());
        tbb::parallel_for(std::size_t{0}, todo.size(), [&](std::size_t k) {
            Expression e{*todo[k], {}};
            e = optimize_constants(std::move(e), ts, x, rt, cfg.const_opt);
            const double r = rt.reward(evaluate(e, ts, x));
            fresh[k] = {std::move(e), r};
        });
        for (std::size_t k = 0; k < todo.size(); ++k) cache.emplace(*todo[k], std::move(fresh[k]));
        result.expressions_scored += todo.size();

        std::vector<double> rewards;
        rewards.reserve(batch.size());
        for (const auto& tr : batch) {
            const auto& s = cache.at(tr.tokens);
            rewards.push_back(s.reward);
            if (s.reward > result.best_reward) {
                result.best_reward = s.reward;
                result.best = s.expr;
            }
        }
        result.best_trace.push_back(result.best_reward);
        if (cfg.epochs == 0) break;
        result.epochs_run = epoch + 1;

        const auto kept = risk_filter(rewards, cfg.epsilon);
        std::vector<SampleTrace> retained;
        std::vector<double> kept_rewards;
        for (auto k : kept.retained) {
            retained.push_back(batch[k]);
            kept_rewards.push_back(rewards[k]);
        }
        if (!policy_update(policy, adam, retained, kept_rewards, kept.threshold,
                           cfg.entropy_weight)) {
            result.warnings.push_back("epoch " + std::to_string(epoch) +
                                      ": non-finite policy gradient, update skipped");
        }
        if (result.best_reward >= cfg.stop_reward) break;
    }
    result.runtime_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

TrainResult train(const Dataset& ds, int target_col, const DsrConfig& cfg) {
    ds.validate();
    if (target_col < 0 || target_col >= ds.dX.cols()) {
        throw std::invalid_argument("target column out of range");
    }
    const TokenSet ts(cfg.operators, Dataset::variable_names());
    return train(ds.variables(), ds.dX.col(target_col), ts, cfg,
                 std::string(kStateNames[static_cast<std::size_t>(target_col)]));
}

nlohmann::json to_json(const DsrConfig& cfg) {
    std::vector<std::string> ops;
    for (Op op : cfg.operators) ops.emplace_back(to_string(op));
    return {{"batch_size", cfg.batch_size},
            {"epochs", cfg.epochs},
            {"epsilon", cfg.epsilon},
            {"learning_rate", cfg.learning_rate},
            {"entropy_weight", cfg.entropy_weight},
            {"hidden", cfg.hidden},
            {"max_length", cfg.max_length},
            {"max_constants", cfg.max_constants},
            {"const_opt", {{"restarts", cfg.const_opt.restarts},
                           {"max_evals", cfg.const_opt.max_evals}}},
            {"train_rows", cfg.train_rows},
            {"stop_reward", cfg.stop_reward},
            {"seed", cfg.seed},
            {"operators", ops}};
}

nlohmann::json to_json(const TrainResult& r, const TokenSet& ts) {
    std::vector<std::string> names;
    for (int t : r.best.tokens) names.push_back(ts.name(t));
    return {{"format", "gfmid.dsr_result/1"},
            {"target", r.target},
            {"tokens", names},
            {"infix", to_infix(r.best, ts)},
            {"constants", r.best.constants},
            {"length", r.best.length()},
            {"reward", r.best_reward},
            {"best_trace", r.best_trace},
            {"epochs_run", r.epochs_run},
            {"expressions_scored", r.expressions_scored},
            {"warnings", r.warnings}};
}

Expression expression_from_json(const nlohmann::json& j, const TokenSet& ts) {
    if (j.value("format", "") != "gfmid.dsr_result/1") {
        throw std::invalid_argument("not a DSR result file (format tag missing or unknown)");
    }
    Expression e;
    for (const auto& name : j.at("tokens")) e.tokens.push_back(ts.token(name.get<std::string>()));
    e.constants = j.at("constants").get<std::vector<double>>();
    if (!is_complete(e.tokens, ts) ||
        e.constants.size() != static_cast<std::size_t>(e.const_count(ts))) {
        throw std::invalid_argument("DSR result holds a malformed expression");
    }
    return e;
}

}  // namespace gfmid::dsr
