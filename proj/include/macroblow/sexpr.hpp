#pragma once

// S-expression reader, printer and size metric for the mini-Lisp the rest
// of the toolchain operates on. Trees are immutable values with structural
// sharing, so they can be copied and handed between threads freely.

#include <cctype>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace macroblow {

enum class ErrorCode {
    // reader
    UnbalancedParen,
    UnterminatedString,
    StrayUnquote,
    IllegalCharacter,
    DottedPair,
    // macro definitions
    MalformedLambdaList,
    DuplicateParam,
    MissingBodyParam,
    InvalidSplice,
    // template expansion
    UnboundTemplateVar,
    NestedQuasiquote,
    SpliceOutsideList,
    ArityMismatch,
    ExpansionDepthExceeded,
    // evaluation
    UnboundVariable,
    UnboundFunction,
    NotAFunction,
    TypeError,
    // analysis
    CurveTooShort,
    UnsupportedShape,
    DivisionByZero,
    IndexOutOfRange,
    // refactoring
    UnsupportedConstruct,
    DefectiveMacro,
};

inline const char* error_code_name(ErrorCode code) {
    switch (code) {
    case ErrorCode::UnbalancedParen: return "unbalanced-paren";
    case ErrorCode::UnterminatedString: return "unterminated-string";
    case ErrorCode::StrayUnquote: return "stray-unquote";
    case ErrorCode::IllegalCharacter: return "illegal-character";
    case ErrorCode::DottedPair: return "dotted-pair";
    case ErrorCode::MalformedLambdaList: return "malformed-lambda-list";
    case ErrorCode::DuplicateParam: return "duplicate-param";
    case ErrorCode::MissingBodyParam: return "missing-body-param";
    case ErrorCode::InvalidSplice: return "invalid-splice";
    case ErrorCode::UnboundTemplateVar: return "unbound-template-var";
    case ErrorCode::NestedQuasiquote: return "nested-quasiquote";
    case ErrorCode::SpliceOutsideList: return "splice-outside-list";
    case ErrorCode::ArityMismatch: return "arity-mismatch";
    case ErrorCode::ExpansionDepthExceeded: return "expansion-depth-exceeded";
    case ErrorCode::UnboundVariable: return "unbound-variable";
    case ErrorCode::UnboundFunction: return "unbound-function";
    case ErrorCode::NotAFunction: return "not-a-function";
    case ErrorCode::TypeError: return "type-error";
    case ErrorCode::CurveTooShort: return "curve-too-short";
    case ErrorCode::UnsupportedShape: return "unsupported-shape";
    case ErrorCode::DivisionByZero: return "division-by-zero";
    case ErrorCode::IndexOutOfRange: return "index-out-of-range";
    case ErrorCode::UnsupportedConstruct: return "unsupported-construct";
    case ErrorCode::DefectiveMacro: return "defective-macro";
    }
    return "unknown";
}

// Byte range [begin, end) within one input file.
struct SourceSpan {
    int file = 0;
    std::size_t begin = 0;
    std::size_t end = 0;

    friend bool operator==(const SourceSpan&, const SourceSpan&) = default;
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string message, std::optional<SourceSpan> span = std::nullopt)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
          code_(code),
          message_(std::move(message)),
          span_(span) {}

    ErrorCode code() const { return code_; }
    const std::string& message() const { return message_; }
    const std::optional<SourceSpan>& span() const { return span_; }

    Error with_span(SourceSpan span) const { return Error(code_, message_, span); }

private:
    ErrorCode code_;
    std::string message_;
    std::optional<SourceSpan> span_;
};

// Reader-sugar marker symbols. A marker-headed form is a two-element list
// (marker payload); the printer re-sugars exactly that shape.
inline constexpr std::string_view kQuote = "quote";
inline constexpr std::string_view kQuasiquote = "quasiquote";
inline constexpr std::string_view kUnquote = "unquote";
inline constexpr std::string_view kUnquoteSplicing = "unquote-splicing";

class SExpr {
    struct Sym {
        std::string name;
        friend bool operator==(const Sym&, const Sym&) = default;
    };
    struct Str {
        std::string value;
        friend bool operator==(const Str&, const Str&) = default;
    };
    struct ConsCell;
    using ConsPtr = std::shared_ptr<const ConsCell>;
    // monostate = nil
    using Rep = std::variant<std::monostate, Sym, std::int64_t, Str, ConsPtr>;

public:
    SExpr() = default;  // nil

    static SExpr nil() { return SExpr(); }
    static SExpr symbol(std::string_view name) {
        SExpr e;
        e.rep_ = Sym{std::string(name)};
        return e;
    }
    static SExpr integer(std::int64_t value) {
        SExpr e;
        e.rep_ = value;
        return e;
    }
    static SExpr string(std::string value) {
        SExpr e;
        e.rep_ = Str{std::move(value)};
        return e;
    }
    static SExpr cons(SExpr head, SExpr tail);
    static SExpr list(std::vector<SExpr> elements) {
        SExpr out = nil();
        for (auto it = elements.rbegin(); it != elements.rend(); ++it)
            out = cons(*it, out);
        return out;
    }

    bool is_nil() const { return std::holds_alternative<std::monostate>(rep_); }
    bool is_symbol() const { return std::holds_alternative<Sym>(rep_); }
    bool is_integer() const { return std::holds_alternative<std::int64_t>(rep_); }
    bool is_string() const { return std::holds_alternative<Str>(rep_); }
    bool is_cons() const { return std::holds_alternative<ConsPtr>(rep_); }
    bool is_atom() const { return !is_cons(); }
    // nil or cons; every cons built by the reader is a proper list
    bool is_list() const { return is_nil() || is_cons(); }

    const std::string& symbol_name() const { return std::get<Sym>(rep_).name; }
    std::int64_t integer_value() const { return std::get<std::int64_t>(rep_); }
    const std::string& string_value() const { return std::get<Str>(rep_).value; }

    const SExpr& head() const;
    const SExpr& tail() const;

    bool is_symbol_named(std::string_view name) const {
        return is_symbol() && symbol_name() == name;
    }
    bool headed_by(std::string_view name) const {
        return is_cons() && head().is_symbol_named(name);
    }

    std::vector<SExpr> elements() const {
        std::vector<SExpr> out;
        const SExpr* cur = this;
        while (cur->is_cons()) {
            out.push_back(cur->head());
            cur = &cur->tail();
        }
        return out;
    }

    std::size_t list_length() const {
        std::size_t n = 0;
        const SExpr* cur = this;
        while (cur->is_cons()) {
            ++n;
            cur = &cur->tail();
        }
        return n;
    }

    // Payload of a two-element (marker payload) form, if this is one.
    std::optional<SExpr> marker_payload(std::string_view marker) const {
        if (headed_by(marker) && tail().is_cons() && tail().tail().is_nil())
            return tail().head();
        return std::nullopt;
    }

    friend bool operator==(const SExpr& a, const SExpr& b) { return equal(a, b); }
    friend bool operator!=(const SExpr& a, const SExpr& b) { return !equal(a, b); }

private:
    static bool equal(const SExpr& a, const SExpr& b);

    Rep rep_{};
};

struct SExpr::ConsCell {
    SExpr head;
    SExpr tail;
};

inline SExpr SExpr::cons(SExpr head, SExpr tail) {
    SExpr e;
    e.rep_ = std::make_shared<const ConsCell>(ConsCell{std::move(head), std::move(tail)});
    return e;
}

inline const SExpr& SExpr::head() const { return std::get<ConsPtr>(rep_)->head; }
inline const SExpr& SExpr::tail() const { return std::get<ConsPtr>(rep_)->tail; }

inline bool SExpr::equal(const SExpr& a, const SExpr& b) {
    if (a.rep_.index() != b.rep_.index())
        return false;
    if (a.is_cons()) {
        const ConsPtr& pa = std::get<ConsPtr>(a.rep_);
        const ConsPtr& pb = std::get<ConsPtr>(b.rep_);
        if (pa == pb)
            return true;
        return equal(pa->head, pb->head) && equal(pa->tail, pb->tail);
    }
    return a.rep_ == b.rep_;
}

// Expansion-size metric: atoms plus cons cells, counted recursively. nil is
// the list terminator and weighs nothing, so (princ 6) counts 4.
inline std::int64_t node_count(const SExpr& form) {
    if (form.is_nil())
        return 0;
    if (form.is_atom())
        return 1;
    std::int64_t n = 0;
    const SExpr* cur = &form;
    while (cur->is_cons()) {
        n += 1 + node_count(cur->head());
        cur = &cur->tail();
    }
    n += node_count(*cur);  // 0 for the usual nil terminator
    return n;
}

struct TopForm {
    SExpr form;
    SourceSpan span;
};

namespace detail {

// '#' is reserved so generated symbols can never collide with read input.
inline bool symbol_char(char c) {
    if (std::isspace(static_cast<unsigned char>(c)))
        return false;
    switch (c) {
    case '(':
    case ')':
    case '"':
    case ';':
    case '\'':
    case '`':
    case ',':
    case '#':
        return false;
    default:
        return true;
    }
}

inline bool integer_token(std::string_view token) {
    std::size_t i = 0;
    if (token[0] == '+' || token[0] == '-')
        i = 1;
    if (i == token.size())
        return false;
    for (; i < token.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(token[i])))
            return false;
    return true;
}

class Reader {
public:
    Reader(std::string_view text, int file) : text_(text), file_(file) {}

    std::vector<TopForm> read_all() {
        std::vector<TopForm> out;
        for (;;) {
            skip_blank();
            if (at_end())
                break;
            std::size_t start = pos_;
            SExpr form = read_form(0);
            out.push_back({std::move(form), span(start, pos_)});
        }
        return out;
    }

private:
    bool at_end() const { return pos_ >= text_.size(); }
    char peek() const { return text_[pos_]; }
    SourceSpan span(std::size_t b, std::size_t e) const { return {file_, b, e}; }

    void skip_blank() {
        while (!at_end()) {
            char c = peek();
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else if (c == ';') {
                while (!at_end() && peek() != '\n')
                    ++pos_;
            } else {
                break;
            }
        }
    }

    SExpr read_form(int qq_depth) {
        skip_blank();
        if (at_end())
            throw Error(ErrorCode::UnbalancedParen, "unexpected end of input",
                        span(text_.size(), text_.size()));
        std::size_t start = pos_;
        char c = peek();
        switch (c) {
        case '(':
            ++pos_;
            return read_list(start, qq_depth);
        case ')':
            throw Error(ErrorCode::UnbalancedParen, "unmatched ')'", span(start, start + 1));
        case '\'':
            ++pos_;
            return sugar(kQuote, qq_depth);
        case '`':
            ++pos_;
            return sugar(kQuasiquote, qq_depth + 1);
        case ',': {
            ++pos_;
            if (qq_depth == 0)
                throw Error(ErrorCode::StrayUnquote, "comma outside quasiquote",
                            span(start, pos_));
            if (!at_end() && peek() == '@') {
                ++pos_;
                return sugar(kUnquoteSplicing, qq_depth - 1);
            }
            return sugar(kUnquote, qq_depth - 1);
        }
        case '"':
            return read_string(start);
        case '#':
            throw Error(ErrorCode::IllegalCharacter, "'#' is reserved", span(start, start + 1));
        default:
            return read_atom(start);
        }
    }

    SExpr sugar(std::string_view marker, int qq_depth) {
        SExpr payload = read_form(qq_depth);
        return SExpr::list({SExpr::symbol(marker), std::move(payload)});
    }

    SExpr read_list(std::size_t start, int qq_depth) {
        std::vector<SExpr> elements;
        for (;;) {
            skip_blank();
            if (at_end())
                throw Error(ErrorCode::UnbalancedParen, "unterminated list",
                            span(start, text_.size()));
            if (peek() == ')') {
                ++pos_;
                return SExpr::list(std::move(elements));
            }
            elements.push_back(read_form(qq_depth));
        }
    }

    SExpr read_string(std::size_t start) {
        ++pos_;  // opening quote
        std::string value;
        while (!at_end()) {
            char c = text_[pos_++];
            if (c == '"')
                return SExpr::string(std::move(value));
            if (c == '\\') {
                if (at_end())
                    break;
                char esc = text_[pos_++];
                switch (esc) {
                case 'n': value += '\n'; break;
                case 't': value += '\t'; break;
                default: value += esc; break;
                }
            } else {
                value += c;
            }
        }
        throw Error(ErrorCode::UnterminatedString, "unterminated string",
                    span(start, text_.size()));
    }

    SExpr read_atom(std::size_t start) {
        while (!at_end() && symbol_char(peek()))
            ++pos_;
        std::string token(text_.substr(start, pos_ - start));
        if (token.empty())
            throw Error(ErrorCode::IllegalCharacter, "empty token", span(start, start + 1));
        if (integer_token(token)) {
            try {
                return SExpr::integer(std::stoll(token));
            } catch (const std::out_of_range&) {
                throw Error(ErrorCode::IllegalCharacter, "integer literal out of range",
                            span(start, pos_));
            }
        }
        if (token.find_first_not_of('.') == std::string::npos)
            throw Error(ErrorCode::DottedPair, "dotted pairs are not supported",
                        span(start, pos_));
        for (char& ch : token)
            ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (token == "nil")
            return SExpr::nil();
        return SExpr::symbol(token);
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    int file_;
};

}  // namespace detail

// Reads every toplevel form, in order. Symbols fold to lower case; nil and
// () both read as nil; dotted pairs are rejected.
inline std::vector<TopForm> parse(std::string_view text, int file_id = 0) {
    return detail::Reader(text, file_id).read_all();
}

// Convenience for tests and tools: text must hold exactly one form.
inline SExpr parse_one(std::string_view text) {
    auto forms = parse(text);
    if (forms.size() != 1)
        throw Error(ErrorCode::IndexOutOfRange,
                    "expected exactly one form, got " + std::to_string(forms.size()));
    return forms.front().form;
}

namespace detail {

inline void print_to(const SExpr& form, std::string& out) {
    if (form.is_nil()) {
        out += "nil";
        return;
    }
    if (form.is_integer()) {
        out += std::to_string(form.integer_value());
        return;
    }
    if (form.is_symbol()) {
        out += form.symbol_name();
        return;
    }
    if (form.is_string()) {
        out += '"';
        for (char c : form.string_value()) {
            switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out += c; break;
            }
        }
        out += '"';
        return;
    }
    // cons: re-sugar the quote family
    static constexpr std::pair<std::string_view, std::string_view> sugars[] = {
        {kQuote, "'"},
        {kQuasiquote, "`"},
        {kUnquote, ","},
        {kUnquoteSplicing, ",@"},
    };
    for (const auto& [marker, prefix] : sugars) {
        if (auto payload = form.marker_payload(marker)) {
            out += prefix;
            print_to(*payload, out);
            return;
        }
    }
    out += '(';
    bool first = true;
    const SExpr* cur = &form;
    while (cur->is_cons()) {
        if (!first)
            out += ' ';
        first = false;
        print_to(cur->head(), out);
        cur = &cur->tail();
    }
    out += ')';
}

}  // namespace detail

// Canonical single-space rendering; parse(print(t)) == t for reader-producible trees.
inline std::string print(const SExpr& form) {
    std::string out;
    detail::print_to(form, out);
    return out;
}

}  // namespace macroblow
