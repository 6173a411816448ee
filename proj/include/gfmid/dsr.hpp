#pragma once

// Desk-scale deep symbolic regression: a recurrent policy samples pre-order
// token sequences, constants are fitted by a simplex search, and the policy
// is trained with a risk-seeking policy gradient.

#include "gfmid/dataset.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gfmid::dsr {

enum class Op { add, sub, mul, div, sin, cos };

[[nodiscard]] const char* to_string(Op op) noexcept;
[[nodiscard]] Op parse_op(const std::string& s);
[[nodiscard]] int arity(Op op) noexcept;

/// Dense token ids: operators first (in the given order), then variables,
/// then the constant placeholder.
class TokenSet {
public:
    TokenSet(std::vector<Op> operators, std::vector<std::string> variables);

    /// All six operators over the 12 dataset variables.
    static TokenSet standard();

    [[nodiscard]] int size() const noexcept { return static_cast<int>(arity_.size()); }
    [[nodiscard]] int arity(int token) const { return arity_.at(static_cast<std::size_t>(token)); }
    [[nodiscard]] bool is_operator(int token) const { return token < n_ops(); }
    [[nodiscard]] bool is_variable(int token) const {
        return token >= n_ops() && token < const_token();
    }
    [[nodiscard]] int n_ops() const noexcept { return static_cast<int>(ops_.size()); }
    [[nodiscard]] int const_token() const noexcept { return size() - 1; }
    [[nodiscard]] Op op(int token) const { return ops_.at(static_cast<std::size_t>(token)); }
    /// Column of the variables matrix read by a variable token.
    [[nodiscard]] int variable_index(int token) const { return token - n_ops(); }
    [[nodiscard]] int variable_token(const std::string& name) const;
    [[nodiscard]] int op_token(Op op) const;
    [[nodiscard]] const std::string& name(int token) const {
        return names_.at(static_cast<std::size_t>(token));
    }
    [[nodiscard]] int token(const std::string& name) const;
    [[nodiscard]] const std::vector<std::string>& variables() const noexcept { return variables_; }
    [[nodiscard]] const std::vector<Op>& operators() const noexcept { return ops_; }

private:
    std::vector<Op> ops_;
    std::vector<std::string> variables_;
    std::vector<std::string> names_;
    std::vector<int> arity_;
};

struct Expression {
    std::vector<int> tokens;       // pre-order
    std::vector<double> constants; // one per const token, in pre-order

    [[nodiscard]] std::size_t length() const noexcept { return tokens.size(); }
    [[nodiscard]] int const_count(const TokenSet& ts) const;
    friend bool operator==(const Expression&, const Expression&) = default;
};

/// True when the arity bookkeeping reaches zero exactly at the last token.
[[nodiscard]] bool is_complete(const std::vector<int>& tokens, const TokenSet& ts);

struct Node {
    int token = 0;
    std::vector<Node> children;
    friend bool operator==(const Node&, const Node&) = default;
};

[[nodiscard]] Node decode(const std::vector<int>& tokens, const TokenSet& ts);
[[nodiscard]] std::vector<int> encode(const Node& root);

/// Infix string; constants print their fitted values when present.
[[nodiscard]] std::string to_infix(const Expression& expr, const TokenSet& ts);

struct Evaluation {
    Eigen::VectorXd values;
    bool valid = false;
};

/// Stack evaluation over every row of `variables` (rows x variables).
/// Any non-finite intermediate marks the result invalid.
[[nodiscard]] Evaluation evaluate(const Expression& expr, const TokenSet& ts,
                                  const Eigen::MatrixXd& variables);

/// Target normalization for the reward, computed once per task.
class RewardTarget {
public:
    explicit RewardTarget(Eigen::VectorXd y);
    [[nodiscard]] const Eigen::VectorXd& values() const noexcept { return y_; }
    [[nodiscard]] double std_dev() const noexcept { return std_; }
    /// RMSE / std(target); infinity for an invalid evaluation.
    [[nodiscard]] double nrmse(const Evaluation& e) const;
    /// 1 / (1 + NRMSE); 0 for an invalid evaluation.
    [[nodiscard]] double reward(const Evaluation& e) const;

private:
    Eigen::VectorXd y_;
    double std_ = 0.0;
};

struct ConstOptConfig {
    int restarts = 3;
    int max_evals = 200;
};

/// Nelder-Mead over the constants, one start per seed in {1, -1, 0.1}
/// (cycled when restarts > 3). Returns the best constants found.
[[nodiscard]] Expression optimize_constants(Expression expr, const TokenSet& ts,
                                            const Eigen::MatrixXd& variables,
                                            const RewardTarget& target,
                                            const ConstOptConfig& cfg);

struct RiskFilter {
    std::vector<std::size_t> retained;   // ascending sample index
    double threshold = 0.0;              // R_epsilon
};

[[nodiscard]] RiskFilter risk_filter(const std::vector<double>& rewards, double epsilon);

/// Sampling constraints applied as logit masks.
struct Constraints {
    int max_length = 32;
    int max_unary_chain = 2;
    int max_constants = 5;
};

/// Single-layer tanh recurrent cell fed one-hot (parent, sibling) tokens.
class PolicyNet {
public:
    PolicyNet(int n_tokens, int hidden, std::uint64_t seed);

    [[nodiscard]] int n_tokens() const noexcept { return n_tokens_; }
    [[nodiscard]] int hidden() const noexcept { return hidden_; }
    /// Width of one one-hot block: every token plus "none".
    [[nodiscard]] int context_width() const noexcept { return n_tokens_ + 1; }

    /// Flat parameter vector: W_x, W_h, b_h, W_o, b_o (column-major blocks).
    [[nodiscard]] Eigen::VectorXd& parameters() noexcept { return params_; }
    [[nodiscard]] const Eigen::VectorXd& parameters() const noexcept { return params_; }

    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> w_x() const;
    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> w_h() const;
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b_h() const;
    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> w_o() const;
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> b_o() const;

    [[nodiscard]] Eigen::Map<Eigen::MatrixXd> w_o();
    [[nodiscard]] Eigen::Map<Eigen::VectorXd> b_o();

    [[nodiscard]] std::size_t offset_w_h() const noexcept;
    [[nodiscard]] std::size_t offset_b_h() const noexcept;
    [[nodiscard]] std::size_t offset_w_o() const noexcept;
    [[nodiscard]] std::size_t offset_b_o() const noexcept;

private:
    int n_tokens_;
    int hidden_;
    Eigen::VectorXd params_;
};

/// Tracks open slots while a pre-order sequence is built and yields the
/// (parent, sibling) context and the admissible-token mask of the next slot.
class SequenceState {
public:
    SequenceState(const TokenSet& ts, const Constraints& c);

    [[nodiscard]] bool done() const noexcept { return started_ && stack_.empty(); }
    [[nodiscard]] int parent() const;    // -1 for none
    [[nodiscard]] int sibling() const;   // -1 for none
    [[nodiscard]] std::vector<bool> mask() const;
    void push(int token);
    [[nodiscard]] const std::vector<int>& tokens() const noexcept { return tokens_; }

private:
    struct Slot {
        int token;
        int arity;
        int filled;
        int first_child;
        int unary_chain;
    };
    const TokenSet* ts_;
    Constraints c_;
    std::vector<Slot> stack_;
    std::vector<int> tokens_;
    int open_ = 1;
    int consts_ = 0;
    bool started_ = false;
};

struct PolicyStep {
    Eigen::VectorXd h;
    Eigen::VectorXd probs;   // masked softmax, zero on masked tokens
    double entropy = 0.0;
};

/// One recurrent step from hidden state `h_prev`; -1 means no parent/sibling.
[[nodiscard]] PolicyStep policy_step(const PolicyNet& p, const Eigen::VectorXd& h_prev,
                                     int parent, int sibling, const std::vector<bool>& mask);

/// Per-step record needed to replay a sequence through the policy.
struct SampleTrace {
    std::vector<int> tokens;
    std::vector<int> parents;
    std::vector<int> siblings;
    std::vector<std::vector<bool>> masks;
};

[[nodiscard]] SampleTrace sample_expression(const PolicyNet& policy, const TokenSet& ts,
                                            const Constraints& c, std::mt19937_64& rng);

/// Rebuilds contexts and masks for a given complete sequence.
[[nodiscard]] SampleTrace trace_of(const std::vector<int>& tokens, const TokenSet& ts,
                                   const Constraints& c);

struct SequenceScore {
    double log_prob = 0.0;
    double entropy = 0.0;   // summed over steps
};

[[nodiscard]] SequenceScore score(const PolicyNet& policy, const SampleTrace& trace);

/// Accumulates weight_lp * grad log p + weight_h * grad entropy into `grad`.
SequenceScore accumulate_gradient(const PolicyNet& policy, const SampleTrace& trace,
                                  double weight_lp, double weight_h, Eigen::VectorXd& grad);

class Adam {
public:
    Adam(std::size_t n, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    /// Ascent step on `params` along `grad`.
    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

private:
    double lr_, b1_, b2_, eps_;
    Eigen::VectorXd m_, v_;
    int t_ = 0;
};

struct DsrConfig {
    int batch_size = 500;
    int epochs = 200;
    double epsilon = 0.05;
    double learning_rate = 5e-4;
    double entropy_weight = 0.005;
    int hidden = 32;
    int max_length = 32;
    int max_constants = 5;
    ConstOptConfig const_opt;
    /// Rows used for constant fitting and rewards, evenly spaced over the run.
    int train_rows = 1000;
    /// Training stops once the best reward reaches this value.
    double stop_reward = 1.0;
    std::uint64_t seed = 0;
    std::vector<Op> operators{Op::add, Op::sub, Op::mul, Op::div, Op::sin, Op::cos};

    void validate() const;
};

struct TrainResult {
    std::string target;
    Expression best;
    double best_reward = 0.0;
    std::vector<double> best_trace;   // best-so-far reward after each epoch
    int epochs_run = 0;               // policy updates performed
    std::size_t expressions_scored = 0;
    std::vector<std::string> warnings;
    double runtime_s = 0.0;
};

/// Update from a scored batch. Returns false (and leaves the policy alone)
/// when the gradient is not finite.
bool policy_update(PolicyNet& policy, Adam& adam, const std::vector<SampleTrace>& retained,
                   const std::vector<double>& rewards, double threshold, double entropy_weight);

/// Evenly spaced row indices, all rows when `count` >= rows.
[[nodiscard]] std::vector<Eigen::Index> spread_rows(Eigen::Index rows, int count);

[[nodiscard]] TrainResult train(const Eigen::MatrixXd& variables, const Eigen::VectorXd& target,
                                const TokenSet& ts, const DsrConfig& cfg,
                                const std::string& target_name = "y");

/// One run on a measured-state derivative column of the dataset.
[[nodiscard]] TrainResult train(const Dataset& ds, int target_col, const DsrConfig& cfg);

[[nodiscard]] nlohmann::json to_json(const DsrConfig& cfg);
[[nodiscard]] nlohmann::json to_json(const TrainResult& r, const TokenSet& ts);
/// Reads back the best expression of a result file.
[[nodiscard]] Expression expression_from_json(const nlohmann::json& j, const TokenSet& ts);

}  // namespace gfmid::dsr
