#pragma once

#include <charconv>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <string_view>

namespace meroflow {

using Complex = std::complex<double>;

/** Shortest decimal form that round-trips the exact double. */
inline std::string format_double(double x) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

/** Complex value as "a+bi" / "a-bi" with round-trip components. */
inline std::string format_complex(Complex z) {
    std::string s = format_double(z.real());
    double im = z.imag();
    if (std::signbit(im)) {
        s += '-';
        s += format_double(-im);
    } else {
        s += '+';
        s += format_double(im);
    }
    s += 'i';
    return s;
}

/** Parses "a+bi", "a", or "bi" (no spaces). Throws std::invalid_argument. */
inline Complex parse_complex(std::string_view text) {
    auto fail = [&] { throw std::invalid_argument("bad complex literal: " + std::string(text)); };
    if (text.empty()) fail();

    // locate the separator sign that is not the leading sign and not part of an exponent
    size_t sep = std::string_view::npos;
    for (size_t j = 1; j < text.size(); ++j) {
        char ch = text[j];
        if ((ch == '+' || ch == '-') && text[j - 1] != 'e' && text[j - 1] != 'E')
            sep = j;  // keep last, exponent signs are skipped by the guard
    }

    auto read = [&](std::string_view piece) -> double {
        if (piece.empty()) fail();
        bool neg = piece.front() == '-';
        if (piece.front() == '+' || piece.front() == '-') piece.remove_prefix(1);
        if (piece.empty()) return neg ? -1.0 : 1.0;  // bare sign before 'i'
        double v = 0;
        auto res = std::from_chars(piece.data(), piece.data() + piece.size(), v);
        if (res.ec != std::errc() || res.ptr != piece.data() + piece.size()) fail();
        return neg ? -v : v;
    };

    if (text.back() == 'i') {
        std::string_view body = text.substr(0, text.size() - 1);
        if (sep == std::string_view::npos) {
            if (body.empty()) return Complex(0, 1);  // "i"
            return Complex(0, read(body));
        }
        return Complex(read(body.substr(0, sep)), read(body.substr(sep)));
    }
    if (sep != std::string_view::npos) fail();  // "1+2" without trailing i
    return Complex(read(text), 0);
}

}  // namespace meroflow
