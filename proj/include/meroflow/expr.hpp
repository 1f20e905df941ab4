#pragma once

#include <complex>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace meroflow::expr {

using Complex = std::complex<double>;

// Magnitude guards for evaluation. Finite results always stay below the
// overflow bound; division by anything smaller than the pole bound is a pole.
inline constexpr double kOverflowThreshold = 1e300;
inline constexpr double kPoleThreshold = 1e-300;
inline constexpr int kMaxExponent = 64;

enum class Kind {
    Const, Var,
    Neg, Add, Sub, Mul, Div, Pow,
    Exp, Log, Sin, Cos, Tan,
};

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    Kind kind;
    Complex value{};   // Const only
    int exponent = 0;  // Pow only
    NodePtr a, b;
};

/** Immutable expression tree in one variable z. Cheap to copy, safe to share
 *  across threads once built. */
class Expression {
  public:
    Expression() = default;
    explicit Expression(NodePtr root) : root_(std::move(root)) {}
    const NodePtr& root() const { return root_; }
    bool valid() const { return root_ != nullptr; }

  private:
    NodePtr root_;
};

// node builders (light peephole simplification happens in differentiate, not here)
Expression make_const(Complex c);
Expression make_var();
Expression make_unary(Kind k, Expression a);
Expression make_binary(Kind k, Expression a, Expression b);
Expression make_pow(Expression a, int n);

class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& what, size_t offset)
        : std::runtime_error(what), offset_(offset) {}
    size_t offset() const { return offset_; }

  private:
    size_t offset_;
};

/** Grammar (left associative, integer exponents in [-64, 64]):
 *    term   := factor (('+'|'-') factor)*
 *    factor := unary (('*'|'/') unary)*
 *    unary  := '-' unary | power
 *    power  := atom ('^' signed-integer)?
 *    atom   := number | 'z' | 'i' | func '(' term ')' | '(' term ')'
 *    func   := exp | log | sin | cos | tan
 *  A parenthesized "(a+b*i)" with plain number components collapses to a
 *  single constant; this is the form the printer emits for complex constants,
 *  so print-then-parse reproduces the tree exactly. */
Expression parse(std::string_view text);

/** Canonical fully parenthesized form; parse(print(e)) is structurally equal to e. */
std::string print(const Expression& e);

bool structurally_equal(const Expression& a, const Expression& b);

enum class EvalError { Pole, Overflow, BranchUndefined };

struct EvalOutcome {
    bool ok = false;
    Complex value{};
    EvalError error = EvalError::Overflow;

    static EvalOutcome of(Complex v) { return {true, v, EvalError::Overflow}; }
    static EvalOutcome fail(EvalError e) { return {false, Complex{}, e}; }
};

/** Pointwise evaluation. log uses the principal branch; on the negative real
 *  axis the limit from above is returned. tan reports a pole when cos z is
 *  zero to within rounding of a true tangent pole. */
EvalOutcome evaluate(const Expression& e, Complex z);

/** Symbolic derivative; the result round-trips through print/parse. */
Expression differentiate(const Expression& e);

struct LocalOrder {
    int order = 0;     // leading exponent k of e about z0 (negative for a pole)
    Complex witness{}; // coefficient c with e(z) ~ c (z-z0)^k
};

struct LocalOrderOptions {
    double radius = 1e-3;
    int samples = 64;
    double slope_tol = 0.1;
};

/** Leading-order probe at z0 from mean log-moduli on two concentric circles
 *  (radius and radius/2). Returns nullopt when the slope does not settle on an
 *  integer or a sample fails to evaluate (e.g. essential singularities). */
std::optional<LocalOrder> local_order(const Expression& e, Complex z0,
                                      const LocalOrderOptions& opt = {});

}  // namespace meroflow::expr
