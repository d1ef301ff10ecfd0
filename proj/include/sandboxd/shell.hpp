// shell.hpp - parser for the guest shell's command language.
//
// The grammar is a small dash-like subset:
//
//   script    := pipeline ((';' | '&' | newline) pipeline)* ['&' | ';']
//   pipeline  := command ('|' command)*
//   command   := (NAME=word)* (word | redirect)+   or   (NAME=word)+
//   redirect  := ['0'|'1'|'2'] ('<' | '>' | '>>') word  |  '2>&1'
//
// Words may mix bare text, 'single quotes', "double quotes" and backslash
// escapes; $NAME, ${NAME}, $?, $$, $!, $# and $0-$9 expand outside single
// quotes. '#' at the start of a word begins a comment. There are no
// functions, subshells, command substitution or globbing.
#pragma once

#include <optional>
#include <string>
#include <vector>

namespace sandboxd::shell {

struct Segment {
  enum Kind { Literal, Var };
  Kind kind = Literal;
  // Literal text (already unquoted) or the variable name.
  std::string text;
  // Var only: inside double quotes, so not field-split.
  bool quoted = false;

  bool operator==(const Segment&) const = default;
};

// Adjacent literals are always merged, so equal words compare equal.
struct Word {
  std::vector<Segment> segs;

  bool operator==(const Word&) const = default;
};

struct Redirect {
  enum Mode { Read, Write, Append, DupOut };
  int fd = 1;
  Mode mode = Write;
  // Unused for DupOut, which is always 2>&1.
  Word target;

  bool operator==(const Redirect&) const = default;
};

struct Assignment {
  std::string name;
  Word value;

  bool operator==(const Assignment&) const = default;
};

struct Command {
  std::vector<Assignment> assigns;
  std::vector<Word> words;
  std::vector<Redirect> redirs;

  bool operator==(const Command&) const = default;
};

struct Pipeline {
  std::vector<Command> cmds;
  bool background = false;

  bool operator==(const Pipeline&) const = default;
};

struct Script {
  std::vector<Pipeline> items;

  bool operator==(const Script&) const = default;
};

struct ParseError {
  std::string message;
  // The input ended inside a quote; more lines may complete it.
  bool incomplete = false;
};

struct ParseResult {
  std::optional<Script> script;
  ParseError error;

  bool ok() const { return script.has_value(); }
};

ParseResult parse(const std::string& text);

// Canonical source text; parse(unparse(s)) == s for every valid Script.
std::string unparse(const Script& s);
std::string unparse(const Word& w);

bool valid_name(const std::string& s);

}  // namespace sandboxd::shell
