#include <cctype>

#include "sandboxd/shell.hpp"

namespace sandboxd::shell {

namespace {

bool name_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool name_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
bool special_var(char c) { return c == '?' || c == '$' || c == '!' || c == '#' || (c >= '0' && c <= '9'); }
bool blank(char c) { return c == ' ' || c == '\t' || c == '\r'; }
bool meta(char c) { return blank(c) || c == '\n' || c == '|' || c == '&' || c == ';' || c == '<' || c == '>'; }

void add_literal(Word& w, const std::string& s) {
  if (!w.segs.empty() && w.segs.back().kind == Segment::Literal) {
    w.segs.back().text += s;
    return;
  }
  w.segs.push_back({Segment::Literal, s, false});
}

struct Token {
  enum Kind { WordTok, Pipe, Amp, Semi, Newline, Redir, End };
  Kind kind = End;
  Word word;
  // For WordTok: the leading NAME= text was unquoted, so it may be an
  // assignment.
  std::optional<std::string> assign_name;
  Redirect redir;
};

class Lexer {
 public:
  explicit Lexer(const std::string& s) : s_(s) {}

  bool next(Token& t, ParseError& err) {
    while (pos_ < s_.size() && blank(s_[pos_])) ++pos_;
    t = Token{};
    if (pos_ >= s_.size()) return true;
    char c = s_[pos_];
    if (c == '#') {
      while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      return next(t, err);
    }
    if (c == '\n') {
      ++pos_;
      t.kind = Token::Newline;
      return true;
    }
    if (c == '|') {
      ++pos_;
      t.kind = Token::Pipe;
      return true;
    }
    if (c == '&') {
      ++pos_;
      t.kind = Token::Amp;
      return true;
    }
    if (c == ';') {
      ++pos_;
      t.kind = Token::Semi;
      return true;
    }
    int fd = -1;
    if (c >= '0' && c <= '2' && pos_ + 1 < s_.size() && (s_[pos_ + 1] == '<' || s_[pos_ + 1] == '>')) {
      fd = c - '0';
      ++pos_;
      c = s_[pos_];
    }
    if (c == '<' || c == '>') return redirect(t, err, fd);
    return word(t, err);
  }

 private:
  bool redirect(Token& t, ParseError& err, int fd) {
    t.kind = Token::Redir;
    if (s_[pos_] == '<') {
      ++pos_;
      t.redir.mode = Redirect::Read;
      t.redir.fd = fd < 0 ? 0 : fd;
    } else {
      ++pos_;
      t.redir.fd = fd < 0 ? 1 : fd;
      if (pos_ < s_.size() && s_[pos_] == '>') {
        ++pos_;
        t.redir.mode = Redirect::Append;
      } else if (pos_ + 1 < s_.size() && s_[pos_] == '&' && s_[pos_ + 1] == '1' && t.redir.fd == 2 &&
                 (pos_ + 2 >= s_.size() || meta(s_[pos_ + 2]))) {
        pos_ += 2;
        t.redir.mode = Redirect::DupOut;
        return true;
      } else {
        t.redir.mode = Redirect::Write;
      }
    }
    while (pos_ < s_.size() && blank(s_[pos_])) ++pos_;
    Token target;
    if (pos_ >= s_.size() || meta(s_[pos_]) || s_[pos_] == '#') {
      err.message = "missing redirection target";
      return false;
    }
    if (!word(target, err)) return false;
    t.redir.target = std::move(target.word);
    return true;
  }

  // Appends a $ expansion starting at s_[pos_] == '$'.
  // Returns false on ${...} forms and $( which the subset does not have.
  bool dollar(Word& w, bool quoted, ParseError& err) {
    ++pos_;
    if (pos_ < s_.size() && s_[pos_] == '(') {
      err.message = "syntax error: command substitution is not supported";
      return false;
    }
    if (pos_ < s_.size() && special_var(s_[pos_])) {
      w.segs.push_back({Segment::Var, std::string(1, s_[pos_++]), quoted});
      return true;
    }
    if (pos_ < s_.size() && s_[pos_] == '{') {
      size_t end = pos_ + 1;
      while (end < s_.size() && name_char(s_[end])) ++end;
      std::string name = s_.substr(pos_ + 1, end - pos_ - 1);
      bool ok_name = valid_name(name) || (name.size() == 1 && special_var(name[0]));
      if (end < s_.size() && s_[end] == '}' && ok_name) {
        pos_ = end + 1;
        w.segs.push_back({Segment::Var, name, quoted});
        return true;
      }
      if (pos_ + 2 < s_.size() && s_[pos_ + 2] == '}' && special_var(s_[pos_ + 1])) {
        w.segs.push_back({Segment::Var, std::string(1, s_[pos_ + 1]), quoted});
        pos_ += 3;
        return true;
      }
      err.message = "bad substitution";
      return false;
    }
    if (pos_ < s_.size() && name_start(s_[pos_])) {
      size_t end = pos_;
      while (end < s_.size() && name_char(s_[end])) ++end;
      w.segs.push_back({Segment::Var, s_.substr(pos_, end - pos_), quoted});
      pos_ = end;
      return true;
    }
    add_literal(w, "$");
    return true;
  }

  bool word(Token& t, ParseError& err) {
    t.kind = Token::WordTok;
    Word& w = t.word;
    size_t start = pos_;
    bool quoted_prefix = false;
    while (pos_ < s_.size() && !meta(s_[pos_])) {
      char c = s_[pos_];
      if (c == '\'') {
        size_t end = s_.find('\'', pos_ + 1);
        if (end == std::string::npos) {
          err = {"unterminated quoted string", true};
          return false;
        }
        add_literal(w, s_.substr(pos_ + 1, end - pos_ - 1));
        quoted_prefix = true;
        pos_ = end + 1;
      } else if (c == '"') {
        ++pos_;
        add_literal(w, "");
        quoted_prefix = true;
        for (;;) {
          if (pos_ >= s_.size()) {
            err = {"unterminated quoted string", true};
            return false;
          }
          char d = s_[pos_];
          if (d == '"') {
            ++pos_;
            break;
          }
          if (d == '\\' && pos_ + 1 < s_.size() &&
              (s_[pos_ + 1] == '"' || s_[pos_ + 1] == '\\' || s_[pos_ + 1] == '$' || s_[pos_ + 1] == '`')) {
            add_literal(w, std::string(1, s_[pos_ + 1]));
            pos_ += 2;
          } else if (d == '\\' && pos_ + 1 < s_.size() && s_[pos_ + 1] == '\n') {
            pos_ += 2;
          } else if (d == '$') {
            if (!dollar(w, true, err)) return false;
          } else {
            add_literal(w, std::string(1, d));
            ++pos_;
          }
        }
      } else if (c == '\\') {
        if (pos_ + 1 >= s_.size()) {
          err = {"trailing backslash", true};
          return false;
        }
        if (s_[pos_ + 1] != '\n') add_literal(w, std::string(1, s_[pos_ + 1]));
        quoted_prefix = true;
        pos_ += 2;
      } else if (c == '$') {
        if (!dollar(w, false, err)) return false;
      } else {
        // Assignment candidates need NAME= in plain text at the word start.
        if (c == '=' && !quoted_prefix && !t.assign_name && pos_ > start && w.segs.size() == 1 &&
            valid_name(w.segs[0].text) && w.segs[0].text == s_.substr(start, pos_ - start)) {
          t.assign_name = w.segs[0].text;
          w.segs.clear();
          ++pos_;
          continue;
        }
        add_literal(w, std::string(1, c));
        ++pos_;
      }
    }
    return true;
  }

  const std::string& s_;
  size_t pos_ = 0;
};

// Drops an empty literal that sits next to another segment: it no longer
// affects field splitting because the neighbour is present.
Word tidy(Word w) {
  if (w.segs.size() > 1) {
    std::vector<Segment> out;
    bool dropped = false;
    for (auto& s : w.segs) {
      if (s.kind == Segment::Literal && s.text.empty())
        dropped = true;
      else
        out.push_back(std::move(s));
    }
    bool has_unquoted_var_only = dropped && !out.empty();
    for (auto& s : out)
      if (!(s.kind == Segment::Var && !s.quoted)) has_unquoted_var_only = false;
    // ''$X keeps its empty literal so an empty $X still yields one field.
    if (has_unquoted_var_only) out.insert(out.begin(), Segment{Segment::Literal, "", false});
    w.segs = std::move(out);
  }
  return w;
}

}  // namespace

bool valid_name(const std::string& s) {
  if (s.empty() || !name_start(s[0])) return false;
  for (char c : s)
    if (!name_char(c)) return false;
  return true;
}

ParseResult parse(const std::string& text) {
  ParseResult res;
  Lexer lex(text);
  Script script;
  Pipeline pipe;
  Command cmd;
  bool cmd_open = false;   // cmd has content
  bool need_cmd = false;   // after '|'
  auto fail = [&](const std::string& m) {
    res.error = {m, false};
    return res;
  };
  auto end_command = [&]() {
    pipe.cmds.push_back(std::move(cmd));
    cmd = Command{};
    cmd_open = false;
  };
  for (;;) {
    Token t;
    if (!lex.next(t, res.error)) return res;
    switch (t.kind) {
      case Token::WordTok:
        if (t.assign_name && cmd.words.empty()) {
          cmd.assigns.push_back({*t.assign_name, tidy(std::move(t.word))});
        } else {
          if (t.assign_name) {
            Word w;
            add_literal(w, *t.assign_name + "=");
            for (auto& s : t.word.segs) {
              if (s.kind == Segment::Literal)
                add_literal(w, s.text);
              else
                w.segs.push_back(s);
            }
            t.word = std::move(w);
          }
          cmd.words.push_back(tidy(std::move(t.word)));
        }
        cmd_open = true;
        need_cmd = false;
        break;
      case Token::Redir:
        if (t.redir.mode != Redirect::DupOut) t.redir.target = tidy(std::move(t.redir.target));
        cmd.redirs.push_back(std::move(t.redir));
        cmd_open = true;
        need_cmd = false;
        break;
      case Token::Pipe:
        if (!cmd_open) return fail("syntax error: unexpected \"|\"");
        end_command();
        need_cmd = true;
        break;
      case Token::Amp:
      case Token::Semi:
        if (!cmd_open) return fail(t.kind == Token::Amp ? "syntax error: unexpected \"&\"" : "syntax error: unexpected \";\"");
        end_command();
        pipe.background = t.kind == Token::Amp;
        script.items.push_back(std::move(pipe));
        pipe = Pipeline{};
        break;
      case Token::Newline:
      case Token::End:
        if (need_cmd) {
          if (t.kind == Token::End) {
            res.error = {"syntax error: end of file unexpected", true};
            return res;
          }
          break;  // a pipeline may continue on the next line
        }
        if (cmd_open) {
          end_command();
          script.items.push_back(std::move(pipe));
          pipe = Pipeline{};
        }
        if (t.kind == Token::End) {
          res.script = std::move(script);
          return res;
        }
        break;
    }
  }
}

namespace {

bool safe_bare(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '/' || c == '-' || c == ',' ||
         c == ':' || c == '+' || c == '@' || c == '%';
}

std::string quote_literal(const std::string& s) {
  bool bare = !s.empty();
  for (char c : s)
    if (!safe_bare(c)) bare = false;
  if (bare) return s;
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

}  // namespace

std::string unparse(const Word& w) {
  std::string out;
  for (const auto& s : w.segs) {
    if (s.kind == Segment::Literal) {
      out += quote_literal(s.text);
    } else {
      std::string v = "${" + s.text + "}";
      out += s.quoted ? "\"" + v + "\"" : v;
    }
  }
  return out;
}

std::string unparse(const Script& script) {
  std::string out;
  for (size_t i = 0; i < script.items.size(); ++i) {
    const auto& p = script.items[i];
    for (size_t c = 0; c < p.cmds.size(); ++c) {
      if (c) out += " | ";
      const auto& cmd = p.cmds[c];
      std::string parts;
      auto add = [&](const std::string& s) {
        if (!parts.empty()) parts += ' ';
        parts += s;
      };
      for (const auto& a : cmd.assigns) add(a.name + "=" + unparse(a.value));
      for (const auto& w : cmd.words) add(unparse(w));
      for (const auto& r : cmd.redirs) {
        if (r.mode == Redirect::DupOut) {
          add("2>&1");
          continue;
        }
        std::string op = r.mode == Redirect::Read ? "<" : r.mode == Redirect::Append ? ">>" : ">";
        std::string fd = (r.mode == Redirect::Read ? r.fd == 0 : r.fd == 1) ? "" : std::to_string(r.fd);
        add(fd + op + unparse(r.target));
      }
      out += parts;
    }
    out += p.background ? " &" : (i + 1 < script.items.size() ? ";" : "");
    if (i + 1 < script.items.size()) out += ' ';
  }
  return out;
}

}  // namespace sandboxd::shell
