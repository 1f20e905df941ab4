#include "meroflow/expr.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <vector>

#include "meroflow/numfmt.hpp"

namespace meroflow::expr {

namespace {

NodePtr node(Node n) { return std::make_shared<const Node>(std::move(n)); }

bool sum_norm_overflows(Complex v) {
    double s = std::fabs(v.real()) + std::fabs(v.imag());
    return !std::isfinite(s) || s > kOverflowThreshold;
}

}  // namespace

Expression make_const(Complex c) { return Expression(node({Kind::Const, c, 0, nullptr, nullptr})); }
Expression make_var() { return Expression(node({Kind::Var, {}, 0, nullptr, nullptr})); }

Expression make_unary(Kind k, Expression a) {
    return Expression(node({k, {}, 0, a.root(), nullptr}));
}

Expression make_binary(Kind k, Expression a, Expression b) {
    return Expression(node({k, {}, 0, a.root(), b.root()}));
}

Expression make_pow(Expression a, int n) {
    return Expression(node({Kind::Pow, {}, n, a.root(), nullptr}));
}

// ---------------------------------------------------------------------------
// parsing

namespace {

class Parser {
  public:
    explicit Parser(std::string_view text) : text_(text) {}

    Expression run() {
        NodePtr e = term();
        skip_ws();
        if (pos_ != text_.size()) err("unexpected trailing input", pos_);
        return Expression(e);
    }

  private:
    std::string_view text_;
    size_t pos_ = 0;

    [[noreturn]] void err(const std::string& what, size_t at) { throw ParseError(what, at); }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool peek_is(char c) {
        skip_ws();
        return pos_ < text_.size() && text_[pos_] == c;
    }

    bool eat(char c) {
        if (peek_is(c)) { ++pos_; return true; }
        return false;
    }

    void expect(char c, const char* what) {
        if (!eat(c)) err(what, pos_);
    }

    NodePtr term() {
        NodePtr e = factor();
        for (;;) {
            if (eat('+')) e = node({Kind::Add, {}, 0, e, factor()});
            else if (eat('-')) e = node({Kind::Sub, {}, 0, e, factor()});
            else return e;
        }
    }

    NodePtr factor() {
        NodePtr e = unary();
        for (;;) {
            if (eat('*')) e = node({Kind::Mul, {}, 0, e, unary()});
            else if (eat('/')) e = node({Kind::Div, {}, 0, e, unary()});
            else return e;
        }
    }

    NodePtr unary() {
        if (eat('-')) return node({Kind::Neg, {}, 0, unary(), nullptr});
        return power();
    }

    NodePtr power() {
        NodePtr base = atom();
        if (eat('^')) {
            skip_ws();
            size_t at = pos_;
            long n = signed_integer();
            if (n < -kMaxExponent || n > kMaxExponent) err("exponent out of range", at);
            return node({Kind::Pow, {}, static_cast<int>(n), base, nullptr});
        }
        return base;
    }

    long signed_integer() {
        size_t at = pos_;
        bool neg = false;
        if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-'))
            neg = text_[pos_++] == '-';
        size_t start = pos_;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        if (pos_ == start) err("expected integer exponent", at);
        long v = 0;
        std::from_chars(text_.data() + start, text_.data() + pos_, v);
        return neg ? -v : v;
    }

    // number token: digits with optional fraction and exponent, no sign
    std::optional<double> number() {
        skip_ws();
        size_t start = pos_;
        size_t p = pos_;
        while (p < text_.size() && std::isdigit(static_cast<unsigned char>(text_[p]))) ++p;
        bool digits = p > start;
        if (p < text_.size() && text_[p] == '.') {
            ++p;
            while (p < text_.size() && std::isdigit(static_cast<unsigned char>(text_[p]))) ++p;
            digits = p > start + 1 || digits;
        }
        if (!digits) return std::nullopt;
        if (p < text_.size() && (text_[p] == 'e' || text_[p] == 'E')) {
            size_t q = p + 1;
            if (q < text_.size() && (text_[q] == '+' || text_[q] == '-')) ++q;
            size_t d = q;
            while (d < text_.size() && std::isdigit(static_cast<unsigned char>(text_[d]))) ++d;
            if (d > q) p = d;  // otherwise 'e' belongs to something else; stop before it
        }
        double v = 0;
        auto res = std::from_chars(text_.data() + start, text_.data() + p, v);
        if (res.ec != std::errc()) err("malformed number", start);
        pos_ = p;
        return v;
    }

    std::string_view identifier() {
        skip_ws();
        size_t start = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        return text_.substr(start, pos_ - start);
    }

    // "(a+b*i)" with bare number components; emitted by the printer for
    // complex constants. Returns nullopt (with position restored) otherwise.
    std::optional<Complex> complex_literal() {
        size_t save = pos_;
        auto bail = [&]() -> std::optional<Complex> { pos_ = save; return std::nullopt; };

        bool neg_re = eat('-');
        auto re = number();
        if (!re) return bail();
        double sign_im;
        if (eat('+')) sign_im = 1;
        else if (eat('-')) sign_im = -1;
        else return bail();
        auto im = number();
        if (!im) return bail();
        if (!eat('*')) return bail();
        skip_ws();
        if (pos_ >= text_.size() || text_[pos_] != 'i') return bail();
        ++pos_;
        if (pos_ < text_.size() && std::isalnum(static_cast<unsigned char>(text_[pos_]))) return bail();
        if (!eat(')')) return bail();
        return Complex(neg_re ? -*re : *re, sign_im * *im);
    }

    NodePtr atom() {
        skip_ws();
        if (pos_ >= text_.size()) err("unexpected end of input", pos_);

        if (eat('(')) {
            if (auto lit = complex_literal())
                return node({Kind::Const, *lit, 0, nullptr, nullptr});
            NodePtr e = term();
            expect(')', "expected ')'");
            return e;
        }

        if (auto v = number())
            return node({Kind::Const, Complex(*v, 0), 0, nullptr, nullptr});

        size_t at = pos_;
        std::string_view id = identifier();
        if (id.empty()) err("expected expression", pos_);
        if (id == "z") return node({Kind::Var, {}, 0, nullptr, nullptr});
        if (id == "i") return node({Kind::Const, Complex(0, 1), 0, nullptr, nullptr});

        Kind k;
        if (id == "exp") k = Kind::Exp;
        else if (id == "log") k = Kind::Log;
        else if (id == "sin") k = Kind::Sin;
        else if (id == "cos") k = Kind::Cos;
        else if (id == "tan") k = Kind::Tan;
        else err("unknown identifier", at);

        expect('(', "expected '(' after function name");
        NodePtr arg = term();
        expect(')', "expected ')'");
        return node({k, {}, 0, arg, nullptr});
    }
};

}  // namespace

Expression parse(std::string_view text) { return Parser(text).run(); }

// ---------------------------------------------------------------------------
// printing

namespace {

void print_node(const NodePtr& n, std::string& out) {
    switch (n->kind) {
        case Kind::Const: {
            double re = n->value.real(), im = n->value.imag();
            if (im == 0 && !std::signbit(im) && !std::signbit(re)) {
                out += format_double(re);
            } else {
                // parenthesized literal form; collapses back to one constant
                out += '(';
                out += format_double(re);
                out += std::signbit(im) ? '-' : '+';
                out += format_double(std::fabs(im));
                out += "*i)";
            }
            return;
        }
        case Kind::Var: out += 'z'; return;
        case Kind::Neg:
            out += "(-";
            print_node(n->a, out);
            out += ')';
            return;
        case Kind::Add:
        case Kind::Sub:
        case Kind::Mul:
        case Kind::Div: {
            char op = n->kind == Kind::Add ? '+' : n->kind == Kind::Sub ? '-'
                    : n->kind == Kind::Mul ? '*' : '/';
            out += '(';
            print_node(n->a, out);
            out += op;
            print_node(n->b, out);
            out += ')';
            return;
        }
        case Kind::Pow:
            out += '(';
            print_node(n->a, out);
            out += '^';
            out += std::to_string(n->exponent);
            out += ')';
            return;
        case Kind::Exp: out += "exp("; break;
        case Kind::Log: out += "log("; break;
        case Kind::Sin: out += "sin("; break;
        case Kind::Cos: out += "cos("; break;
        case Kind::Tan: out += "tan("; break;
    }
    print_node(n->a, out);
    out += ')';
}

}  // namespace

std::string print(const Expression& e) {
    std::string out;
    print_node(e.root(), out);
    return out;
}

namespace {

bool equal_nodes(const NodePtr& x, const NodePtr& y) {
    if (x == y) return true;
    if (!x || !y || x->kind != y->kind) return false;
    switch (x->kind) {
        case Kind::Const: return x->value == y->value;
        case Kind::Var: return true;
        case Kind::Pow: return x->exponent == y->exponent && equal_nodes(x->a, y->a);
        default:
            return equal_nodes(x->a, y->a) && (x->b == nullptr) == (y->b == nullptr) &&
                   (!x->b || equal_nodes(x->b, y->b));
    }
}

}  // namespace

bool structurally_equal(const Expression& a, const Expression& b) {
    return equal_nodes(a.root(), b.root());
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

EvalOutcome guard(Complex v) {
    if (sum_norm_overflows(v)) return EvalOutcome::fail(EvalError::Overflow);
    return EvalOutcome::of(v);
}

EvalOutcome eval_node(const NodePtr& n, Complex z);

EvalOutcome eval_pow(Complex base, int n) {
    if (n == 0) return EvalOutcome::of(Complex(1, 0));
    bool invert = n < 0;
    unsigned k = invert ? static_cast<unsigned>(-static_cast<long>(n)) : static_cast<unsigned>(n);
    Complex acc(1, 0), sq = base;
    for (;;) {
        if (k & 1) {
            acc *= sq;
            if (sum_norm_overflows(acc)) return EvalOutcome::fail(EvalError::Overflow);
        }
        k >>= 1;
        if (k == 0) break;
        sq *= sq;
        if (sum_norm_overflows(sq)) return EvalOutcome::fail(EvalError::Overflow);
    }
    if (invert) {
        if (std::abs(acc) < kPoleThreshold) return EvalOutcome::fail(EvalError::Pole);
        return guard(Complex(1, 0) / acc);
    }
    return EvalOutcome::of(acc);
}

EvalOutcome eval_node(const NodePtr& n, Complex z) {
    switch (n->kind) {
        case Kind::Const: return EvalOutcome::of(n->value);
        case Kind::Var: return guard(z);
        case Kind::Neg: {
            auto a = eval_node(n->a, z);
            return a.ok ? EvalOutcome::of(-a.value) : a;
        }
        case Kind::Add:
        case Kind::Sub:
        case Kind::Mul:
        case Kind::Div: {
            auto a = eval_node(n->a, z);
            if (!a.ok) return a;
            auto b = eval_node(n->b, z);
            if (!b.ok) return b;
            switch (n->kind) {
                case Kind::Add: return guard(a.value + b.value);
                case Kind::Sub: return guard(a.value - b.value);
                case Kind::Mul: return guard(a.value * b.value);
                default:
                    if (std::abs(b.value) < kPoleThreshold)
                        return EvalOutcome::fail(EvalError::Pole);
                    return guard(a.value / b.value);
            }
        }
        case Kind::Pow: {
            auto a = eval_node(n->a, z);
            if (!a.ok) return a;
            if (n->exponent < 0 && std::abs(a.value) < kPoleThreshold)
                return EvalOutcome::fail(EvalError::Pole);
            return eval_pow(a.value, n->exponent);
        }
        case Kind::Exp: {
            auto a = eval_node(n->a, z);
            if (!a.ok) return a;
            if (a.value.real() > 690.7754889325)  // log(1e300)
                return EvalOutcome::fail(EvalError::Overflow);
            return guard(std::exp(a.value));
        }
        case Kind::Log: {
            auto a = eval_node(n->a, z);
            if (!a.ok) return a;
            if (a.value == Complex(0, 0)) return EvalOutcome::fail(EvalError::BranchUndefined);
            Complex v = a.value;
            if (v.imag() == 0) v = Complex(v.real(), +0.0);  // cut approached from above
            return guard(std::log(v));
        }
        case Kind::Sin: {
            auto a = eval_node(n->a, z);
            return a.ok ? guard(std::sin(a.value)) : a;
        }
        case Kind::Cos: {
            auto a = eval_node(n->a, z);
            return a.ok ? guard(std::cos(a.value)) : a;
        }
        case Kind::Tan: {
            auto a = eval_node(n->a, z);
            if (!a.ok) return a;
            if (std::fabs(a.value.imag()) < 30) {
                Complex s = std::sin(a.value), c = std::cos(a.value);
                // rounding-level |cos| at a tangent pole counts as the pole
                if (std::abs(c) <= 1e-14 * (1 + std::abs(s)))
                    return EvalOutcome::fail(EvalError::Pole);
                return guard(s / c);
            }
            return guard(std::tan(a.value));  // far from the real axis tan ~ +-i
        }
    }
    return EvalOutcome::fail(EvalError::Overflow);  // unreachable
}

}  // namespace

EvalOutcome evaluate(const Expression& e, Complex z) { return eval_node(e.root(), z); }

// ---------------------------------------------------------------------------
// differentiation

namespace {

bool is_const(const NodePtr& n, Complex c) { return n->kind == Kind::Const && n->value == c; }

NodePtr cnode(Complex c) { return node({Kind::Const, c, 0, nullptr, nullptr}); }

NodePtr add(NodePtr a, NodePtr b) {
    if (is_const(a, {0, 0})) return b;
    if (is_const(b, {0, 0})) return a;
    return node({Kind::Add, {}, 0, a, b});
}

NodePtr sub(NodePtr a, NodePtr b) {
    if (is_const(b, {0, 0})) return a;
    if (is_const(a, {0, 0})) return node({Kind::Neg, {}, 0, b, nullptr});
    return node({Kind::Sub, {}, 0, a, b});
}

NodePtr mul(NodePtr a, NodePtr b) {
    if (is_const(a, {0, 0}) || is_const(b, {0, 0})) return cnode({0, 0});
    if (is_const(a, {1, 0})) return b;
    if (is_const(b, {1, 0})) return a;
    return node({Kind::Mul, {}, 0, a, b});
}

NodePtr divide(NodePtr a, NodePtr b) {
    if (is_const(a, {0, 0})) return cnode({0, 0});
    return node({Kind::Div, {}, 0, a, b});
}

NodePtr neg(NodePtr a) {
    if (is_const(a, {0, 0})) return a;
    return node({Kind::Neg, {}, 0, a, nullptr});
}

NodePtr pow_node(NodePtr a, int n) {
    if (n == 1) return a;
    if (n == 0) return cnode({1, 0});
    return node({Kind::Pow, {}, n, a, nullptr});
}

NodePtr unary(Kind k, NodePtr a) { return node({k, {}, 0, a, nullptr}); }

NodePtr diff(const NodePtr& n) {
    switch (n->kind) {
        case Kind::Const: return cnode({0, 0});
        case Kind::Var: return cnode({1, 0});
        case Kind::Neg: return neg(diff(n->a));
        case Kind::Add: return add(diff(n->a), diff(n->b));
        case Kind::Sub: return sub(diff(n->a), diff(n->b));
        case Kind::Mul: return add(mul(diff(n->a), n->b), mul(n->a, diff(n->b)));
        case Kind::Div:
            return divide(sub(mul(diff(n->a), n->b), mul(n->a, diff(n->b))),
                          pow_node(n->b, 2));
        case Kind::Pow:
            if (n->exponent == 0) return cnode({0, 0});
            return mul(cnode({static_cast<double>(n->exponent), 0}),
                       mul(pow_node(n->a, n->exponent - 1), diff(n->a)));
        case Kind::Exp: return mul(unary(Kind::Exp, n->a), diff(n->a));
        case Kind::Log: return divide(diff(n->a), n->a);
        case Kind::Sin: return mul(unary(Kind::Cos, n->a), diff(n->a));
        case Kind::Cos: return neg(mul(unary(Kind::Sin, n->a), diff(n->a)));
        case Kind::Tan:
            return mul(add(cnode({1, 0}), pow_node(unary(Kind::Tan, n->a), 2)), diff(n->a));
    }
    return cnode({0, 0});  // unreachable
}

}  // namespace

Expression differentiate(const Expression& e) { return Expression(diff(e.root())); }

// ---------------------------------------------------------------------------
// local order probe

std::optional<LocalOrder> local_order(const Expression& e, Complex z0,
                                      const LocalOrderOptions& opt) {
    const int m = opt.samples;
    auto ring_mean_log = [&](double rho, double* mean_out) -> bool {
        double acc = 0;
        for (int j = 0; j < m; ++j) {
            double th = 2 * M_PI * j / m;
            auto r = evaluate(e, z0 + std::polar(rho, th));
            if (!r.ok) return false;
            double a = std::abs(r.value);
            if (a == 0) return false;
            acc += std::log(a);
        }
        *mean_out = acc / m;
        return true;
    };

    double outer, inner;
    if (!ring_mean_log(opt.radius, &outer)) return std::nullopt;
    if (!ring_mean_log(opt.radius / 2, &inner)) return std::nullopt;

    double slope = (outer - inner) / std::log(2.0);
    double rounded = std::round(slope);
    if (std::fabs(slope - rounded) > opt.slope_tol) return std::nullopt;
    int k = static_cast<int>(rounded);

    Complex acc{};
    double rho = opt.radius / 2;
    for (int j = 0; j < m; ++j) {
        double th = 2 * M_PI * j / m;
        auto r = evaluate(e, z0 + std::polar(rho, th));
        if (!r.ok) return std::nullopt;
        acc += r.value * std::polar(std::pow(rho, -k), -k * th);
    }
    return LocalOrder{k, acc / static_cast<double>(m)};
}

}  // namespace meroflow::expr
