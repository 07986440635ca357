#include "rwdre/config.hpp"

#include <algorithm>
#include <charconv>
#include <climits>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string_view>

#include "rwdre/io.hpp"
#include "rwdre/registry.hpp"

namespace rwdre {

namespace {

// ---------------------------------------------------------------------------
// Raw INI layer: lines, sections, keys, byte-accurate positions.

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
  int key_col = 0;
  int val_col = 0;
};

struct SectionData {
  int line = 0;
  std::vector<Entry> entries;
};

using RawDoc = std::map<std::string, SectionData>;

constexpr const char* kSections[] = {"experiment", "lattice", "engine", "rates", "rates_b",
                                     "observable", "time",    "phi",    "run"};

bool known_section(std::string_view name) {
  for (const char* s : kSections) {
    if (name == s) return true;
  }
  return false;
}

bool is_index_suffix(std::string_view s) {
  if (s.empty() || s.size() > 6) return false;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
  }
  return true;
}

bool known_key(const std::string& sec, const std::string& key) {
  auto one_of = [&](std::initializer_list<const char*> names) {
    for (const char* n : names) {
      if (key == n) return true;
    }
    return false;
  };
  if (sec == "experiment") return one_of({"name", "strategy", "pairs"});
  if (sec == "lattice") return one_of({"d", "L", "wrap"});
  if (sec == "engine") return one_of({"kind", "lambda", "beta", "order", "layers"});
  if (sec == "rates" || sec == "rates_b") {
    if (one_of({"family", "eps", "jumps", "window"})) return true;
    std::string_view k = key;
    if (k.starts_with("rate.")) return is_index_suffix(k.substr(5));
    if (k.starts_with("table.")) return is_index_suffix(k.substr(6));
    return false;
  }
  if (sec == "observable") return one_of({"kind", "site", "site2", "layer", "value"});
  if (sec == "time") return one_of({"grid", "horizon", "burn_in", "tau_horizon"});
  if (sec == "phi") return one_of({"kind", "beta", "a", "b", "k_grid"});
  if (sec == "run")
    return one_of({"replicas", "seed", "tau_replicas", "dump_trajectories", "export_generator"});
  return false;
}

std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

RawDoc tokenize(const std::string& text, std::vector<ConfigIssue>& issues) {
  RawDoc doc;
  std::string current;      // empty until the first section header
  bool in_unknown = false;  // inside a section whose name was not recognized
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos, (nl == std::string::npos ? text.size() : nl) - pos);
    pos = (nl == std::string::npos) ? text.size() + 1 : nl + 1;
    ++line_no;

    std::size_t first = 0;
    while (first < line.size() && (line[first] == ' ' || line[first] == '\t')) ++first;
    if (first == line.size() || line[first] == '\r') continue;
    char c = line[first];
    if (c == '#' || c == ';') continue;

    if (c == '[') {
      std::size_t close = line.find(']', first);
      if (close == std::string_view::npos) {
        issues.push_back({line_no, int(first) + 1, "unterminated section header"});
        continue;
      }
      std::string name(trim(line.substr(first + 1, close - first - 1)));
      if (!trim(line.substr(close + 1)).empty()) {
        issues.push_back({line_no, int(close) + 2, "unexpected text after section header"});
      }
      if (!known_section(name)) {
        issues.push_back({line_no, int(first) + 1, "unknown section [" + name + "]"});
        current.clear();
        in_unknown = true;  // swallow the body; its keys cannot be classified
        continue;
      }
      in_unknown = false;
      auto [it, inserted] = doc.try_emplace(name);
      if (inserted) {
        it->second.line = line_no;
      } else {
        std::ostringstream m;
        m << "section [" << name << "] reopened (first opened at line " << it->second.line << ")";
        issues.push_back({line_no, int(first) + 1, m.str()});
      }
      current = name;
      continue;
    }

    std::size_t eq = line.find('=', first);
    if (eq == std::string_view::npos) {
      issues.push_back({line_no, int(first) + 1, "expected 'key = value' or a section header"});
      continue;
    }
    std::string key(trim(line.substr(first, eq - first)));
    std::string_view raw_val = line.substr(eq + 1);
    std::string value(trim(raw_val));
    int key_col = int(first) + 1;
    std::size_t voff = eq + 1;
    while (voff < line.size() && (line[voff] == ' ' || line[voff] == '\t')) ++voff;
    int val_col = int(voff) + 1;
    if (key.empty()) {
      issues.push_back({line_no, key_col, "empty key before '='"});
      continue;
    }
    if (current.empty()) {
      if (!in_unknown)
        issues.push_back({line_no, key_col, "key '" + key + "' outside any [section]"});
      continue;
    }
    SectionData& sec = doc[current];
    for (const Entry& prev : sec.entries) {
      if (prev.key == key) {
        std::ostringstream m;
        m << "duplicate key '" << key << "' in [" << current << "] (first at line " << prev.line
          << ")";
        issues.push_back({line_no, key_col, m.str()});
      }
    }
    if (value.empty()) {
      issues.push_back({line_no, val_col, "empty value for key '" + key + "'"});
      continue;
    }
    sec.entries.push_back(Entry{key, value, line_no, key_col, val_col});
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Typed access with issue collection.

std::optional<double> to_double(std::string_view t) {
  double v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || p != t.data() + t.size()) return std::nullopt;
  return v;
}

std::optional<std::int64_t> to_int(std::string_view t) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || p != t.data() + t.size()) return std::nullopt;
  return v;
}

std::optional<std::uint64_t> to_uint(std::string_view t) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || p != t.data() + t.size()) return std::nullopt;
  return v;
}

class Sem {
 public:
  Sem(RawDoc doc, std::vector<ConfigIssue>& issues) : doc_(std::move(doc)), issues_(issues) {}

  void add(int line, int col, std::string msg) { issues_.push_back({line, col, std::move(msg)}); }
  void add_at(const Entry& e, std::string msg) { add(e.line, e.val_col, std::move(msg)); }
  std::size_t issue_count() const { return issues_.size(); }

  bool present(const std::string& sec) const { return doc_.count(sec) != 0; }
  int sec_line(const std::string& sec) const {
    auto it = doc_.find(sec);
    return it == doc_.end() ? 0 : it->second.line;
  }
  const std::vector<Entry>& entries(const std::string& sec) const {
    static const std::vector<Entry> kEmpty;
    auto it = doc_.find(sec);
    return it == doc_.end() ? kEmpty : it->second.entries;
  }
  const Entry* find(const std::string& sec, const std::string& key) const {
    for (const Entry& e : entries(sec)) {
      if (e.key == key) return &e;
    }
    return nullptr;
  }

  std::optional<std::string> str(const std::string& sec, const std::string& key) {
    const Entry* e = find(sec, key);
    if (!e) return std::nullopt;
    return e->value;
  }
  std::optional<double> num(const std::string& sec, const std::string& key) {
    const Entry* e = find(sec, key);
    if (!e) return std::nullopt;
    auto v = to_double(e->value);
    if (!v) add_at(*e, "expected a number for '" + key + "', got '" + e->value + "'");
    return v;
  }
  std::optional<std::int64_t> integer(const std::string& sec, const std::string& key) {
    const Entry* e = find(sec, key);
    if (!e) return std::nullopt;
    auto v = to_int(e->value);
    if (!v) add_at(*e, "expected an integer for '" + key + "', got '" + e->value + "'");
    return v;
  }
  std::optional<std::uint64_t> uint(const std::string& sec, const std::string& key) {
    const Entry* e = find(sec, key);
    if (!e) return std::nullopt;
    auto v = to_uint(e->value);
    if (!v) add_at(*e, "expected a nonnegative integer for '" + key + "', got '" + e->value + "'");
    return v;
  }
  std::optional<bool> boolean(const std::string& sec, const std::string& key) {
    const Entry* e = find(sec, key);
    if (!e) return std::nullopt;
    if (e->value == "true") return true;
    if (e->value == "false") return false;
    add_at(*e, "expected true or false for '" + key + "', got '" + e->value + "'");
    return std::nullopt;
  }

 private:
  RawDoc doc_;
  std::vector<ConfigIssue>& issues_;
};

// Whitespace tokens of a value, each with its 1-based column.
std::vector<std::pair<std::string, int>> split_tokens(const Entry& e) {
  std::vector<std::pair<std::string, int>> out;
  const std::string& v = e.value;
  std::size_t i = 0;
  while (i < v.size()) {
    while (i < v.size() && (v[i] == ' ' || v[i] == '\t')) ++i;
    if (i >= v.size()) break;
    std::size_t j = i;
    while (j < v.size() && v[j] != ' ' && v[j] != '\t') ++j;
    out.emplace_back(v.substr(i, j - i), e.val_col + int(i));
    i = j;
  }
  return out;
}

// A site is a bare integer in d = 1 or a comma tuple "(a,b)" / "(a,b,c)" with
// exactly d components and no interior spaces.
std::optional<Site> parse_site_token(const std::string& tok, int d, std::string& err) {
  Site s = kOrigin;
  if (!tok.empty() && tok.front() == '(') {
    if (tok.back() != ')') {
      err = "unterminated tuple '" + tok + "'";
      return std::nullopt;
    }
    std::string_view inner(tok.data() + 1, tok.size() - 2);
    int idx = 0;
    std::size_t p = 0;
    while (true) {
      std::size_t comma = inner.find(',', p);
      std::string_view part = inner.substr(p, comma == std::string_view::npos ? inner.npos : comma - p);
      auto v = to_int(part);
      if (!v) {
        err = "bad tuple component '" + std::string(part) + "' in '" + tok + "'";
        return std::nullopt;
      }
      if (idx >= 3) {
        err = "too many components in '" + tok + "'";
        return std::nullopt;
      }
      s[std::size_t(idx++)] = *v;
      if (comma == std::string_view::npos) break;
      p = comma + 1;
    }
    if (idx != d) {
      std::ostringstream m;
      m << "site '" << tok << "' has " << idx << " components, lattice dimension is " << d;
      err = m.str();
      return std::nullopt;
    }
    return s;
  }
  if (d != 1) {
    err = "site '" + tok + "' must be a (..) tuple when d = " + std::to_string(d);
    return std::nullopt;
  }
  auto v = to_int(tok);
  if (!v) {
    err = "expected a site, got '" + tok + "'";
    return std::nullopt;
  }
  s[0] = *v;
  return s;
}

std::vector<Site> parse_site_list(Sem& s, const Entry& e, int d) {
  std::vector<Site> out;
  for (const auto& [tok, col] : split_tokens(e)) {
    std::string err;
    auto site = parse_site_token(tok, d, err);
    if (!site) {
      s.add(e.line, col, err);
      continue;
    }
    for (const Site& prev : out) {
      if (prev == *site) s.add(e.line, col, "repeated site '" + tok + "'");
    }
    out.push_back(*site);
  }
  return out;
}

std::string site_repr(const Site& x, int d) {
  if (d == 1) return std::to_string(x[0]);
  std::ostringstream o;
  o << '(' << x[0] << ',' << x[1];
  if (d == 3) o << ',' << x[2];
  o << ')';
  return o.str();
}

// "a:step:b" inclusive range, or an explicit strictly increasing list.
std::vector<double> parse_grid(Sem& s, const Entry& e) {
  std::vector<double> out;
  if (e.value.find(':') != std::string::npos) {
    std::string_view v = e.value;
    std::size_t c1 = v.find(':'), c2 = v.find(':', c1 + 1);
    if (c2 == std::string_view::npos || v.find(':', c2 + 1) != std::string_view::npos) {
      s.add_at(e, "grid range must be start:step:stop");
      return out;
    }
    auto a = to_double(trim(v.substr(0, c1)));
    auto step = to_double(trim(v.substr(c1 + 1, c2 - c1 - 1)));
    auto b = to_double(trim(v.substr(c2 + 1)));
    if (!a || !step || !b) {
      s.add_at(e, "grid range must be start:step:stop with numeric fields");
      return out;
    }
    if (*a < 0 || *step <= 0 || *b < *a) {
      s.add_at(e, "grid range needs start >= 0, step > 0, stop >= start");
      return out;
    }
    std::size_t n = std::size_t((*b - *a) / *step + 1e-9) + 1;
    for (std::size_t i = 0; i < n; ++i) out.push_back(*a + double(i) * *step);
    return out;
  }
  double prev = -1;
  for (const auto& [tok, col] : split_tokens(e)) {
    auto v = to_double(tok);
    if (!v) {
      s.add(e.line, col, "expected a number in the grid, got '" + tok + "'");
      return {};
    }
    if (*v < 0) s.add(e.line, col, "grid times must be >= 0");
    if (*v <= prev) s.add(e.line, col, "grid times must be strictly increasing");
    prev = *v;
    out.push_back(*v);
  }
  if (out.empty()) s.add_at(e, "empty grid");
  return out;
}

// ---------------------------------------------------------------------------
// Source forms kept for canonical re-emission.

struct JumpSpec {
  bool is_table = false;
  double value = 0;
  std::vector<double> table;
};

struct RateSrc {
  bool present = false;
  bool family = false;  // family = site_biased
  double eps = 0;
  std::vector<Site> jumps;
  std::vector<JumpSpec> specs;
  std::vector<Site> window;
  bool any_table = false;
};

struct ObsSrc {
  std::string kind;
  Site site = kOrigin;
  Site site2 = kOrigin;
  std::uint32_t layer = 0;
  double value = 0;
};

void reject_inapplicable(Sem& s, const std::string& sec, const std::string& kind_key,
                         const std::string& kind, std::initializer_list<const char*> applicable) {
  for (const Entry& e : s.entries(sec)) {
    if (e.key == kind_key) continue;
    bool ok = false;
    for (const char* a : applicable) {
      if (e.key == a) ok = true;
    }
    if (!ok) {
      s.add(e.line, e.key_col,
            "key '" + e.key + "' does not apply to " + sec + " kind '" + kind + "'");
    }
  }
}

void build_rates(Sem& s, const std::string& sec, int d, RateSrc& src, RateFunction& out,
                 bool& has) {
  if (!s.present(sec)) return;
  src.present = true;
  std::size_t before = s.issue_count();

  const Entry* fam = s.find(sec, "family");
  if (fam) {
    for (const Entry& e : s.entries(sec)) {
      if (e.key != "family" && e.key != "eps") {
        s.add(e.line, e.key_col, "key '" + e.key + "' conflicts with 'family' in [" + sec + "]");
      }
    }
    if (fam->value != "site_biased") {
      s.add_at(*fam, "unknown rate family '" + fam->value + "' (expected site_biased)");
      return;
    }
    src.family = true;
    const Entry* eps = s.find(sec, "eps");
    if (!eps) {
      s.add(fam->line, fam->key_col, "family site_biased needs 'eps'");
      return;
    }
    auto v = s.num(sec, "eps");
    if (!v) return;
    if (*v < -1) {
      s.add_at(*eps, "eps must be >= -1 so all rates stay nonnegative");
      return;
    }
    src.eps = *v;
    if (s.issue_count() != before) return;
    out = RateFunction::site_biased(*v);
    has = true;
    return;
  }

  const Entry* jumps_e = s.find(sec, "jumps");
  if (!jumps_e) {
    s.add(s.sec_line(sec), 1, "[" + sec + "] needs either 'family' or 'jumps'");
    return;
  }
  src.jumps = parse_site_list(s, *jumps_e, d);
  for (std::size_t i = 0; i < src.jumps.size(); ++i) {
    if (src.jumps[i] == kOrigin) {
      s.add_at(*jumps_e, "zero jump displacement is not allowed");
    }
  }
  if (const Entry* w = s.find(sec, "window")) {
    src.window = parse_site_list(s, *w, d);
    if (src.window.size() > 16) {
      s.add_at(*w, "window of " + std::to_string(src.window.size()) +
                       " sites needs a 2^n-entry table; more than 16 sites is refused");
    }
  }

  const std::size_t n = src.jumps.size();
  src.specs.assign(n, JumpSpec{});
  std::vector<const Entry*> rate_e(n, nullptr), table_e(n, nullptr);
  for (const Entry& e : s.entries(sec)) {
    bool is_rate = e.key.starts_with("rate.");
    bool is_table = e.key.starts_with("table.");
    if (!is_rate && !is_table) continue;
    std::string suffix = e.key.substr(is_rate ? 5 : 6);
    if (!is_index_suffix(suffix)) continue;  // already reported as unknown key
    std::uint64_t idx = *to_uint(suffix);
    if (idx >= n) {
      std::ostringstream m;
      m << "'" << e.key << "' refers to jump " << idx << " but only " << n
        << " jump(s) are declared";
      s.add(e.line, e.key_col, m.str());
      continue;
    }
    (is_rate ? rate_e : table_e)[idx] = &e;
  }

  for (std::size_t i = 0; i < n; ++i) {
    const std::string repr = site_repr(src.jumps[i], d);
    if (rate_e[i] && table_e[i]) {
      const Entry* later = table_e[i]->line > rate_e[i]->line ? table_e[i] : rate_e[i];
      s.add(later->line, later->key_col,
            "jump " + repr + ": both 'rate." + std::to_string(i) + "' and 'table." +
                std::to_string(i) + "' given; pick one");
      continue;
    }
    if (!rate_e[i] && !table_e[i]) {
      s.add_at(*jumps_e, "jump " + repr + ": no rate given (expected 'rate." + std::to_string(i) +
                             "' or 'table." + std::to_string(i) + "')");
      continue;
    }
    if (rate_e[i]) {
      auto v = to_double(rate_e[i]->value);
      if (!v) {
        s.add_at(*rate_e[i], "expected a number, got '" + rate_e[i]->value + "'");
        continue;
      }
      if (*v < 0) {
        s.add_at(*rate_e[i], "rates must be >= 0");
        continue;
      }
      src.specs[i].value = *v;
      continue;
    }
    src.specs[i].is_table = true;
    src.any_table = true;
    if (src.window.empty()) {
      s.add(table_e[i]->line, table_e[i]->key_col,
            "'" + table_e[i]->key + "' needs a shared 'window' key");
      continue;
    }
    std::vector<double> vals;
    for (const auto& [tok, col] : split_tokens(*table_e[i])) {
      auto v = to_double(tok);
      if (!v) {
        s.add(table_e[i]->line, col, "expected a number in the table, got '" + tok + "'");
        continue;
      }
      if (*v < 0) s.add(table_e[i]->line, col, "rates must be >= 0");
      vals.push_back(*v);
    }
    const std::size_t want = std::size_t(1) << src.window.size();
    if (vals.size() != want) {
      std::ostringstream m;
      m << "'" << table_e[i]->key << "' has " << vals.size() << " values, expected 2^"
        << src.window.size() << " = " << want << " for the window";
      s.add_at(*table_e[i], m.str());
    }
    src.specs[i].table = std::move(vals);
  }

  if (s.issue_count() != before) return;
  RateFunction rf;
  rf.jumps = src.jumps;
  try {
    for (std::size_t i = 0; i < n; ++i) {
      if (src.specs[i].is_table) {
        rf.alpha.push_back(LocalFunction::from_table(src.window, src.specs[i].table));
      } else {
        rf.alpha.push_back(LocalFunction::constant(src.specs[i].value));
      }
    }
    rf.validate();
  } catch (const Error& e) {
    s.add(s.sec_line(sec), 1, std::string("[") + sec + "] rejected: " + e.what());
    return;
  }
  out = std::move(rf);
  has = true;
}

std::string fd(double v) { return format_double(v); }

}  // namespace

// ---------------------------------------------------------------------------

std::string ConfigIssue::render() const {
  if (line <= 0) return message;
  std::ostringstream o;
  o << "line " << line << ", col " << col << ": " << message;
  return o.str();
}

namespace {
std::string join_issues(const std::vector<ConfigIssue>& v) {
  std::ostringstream o;
  o << "invalid config (" << v.size() << (v.size() == 1 ? " issue)" : " issues)");
  for (const ConfigIssue& i : v) o << "\n  " << i.render();
  return o.str();
}
}  // namespace

ConfigError::ConfigError(std::vector<ConfigIssue> issues)
    : Error(join_issues(issues)), issues_(std::move(issues)) {}

EnginePtr ExperimentConfig::make_engine() const {
  if (engine_kind == "resampling") return make_resampling_engine(lambda);
  if (engine_kind == "glauber") return make_glauber_engine(glauber_beta, lambda);
  if (engine_kind == "layered")
    return make_layered_engine(LayerSpec::power_law(layer_order, layers));
  return make_frozen_engine();
}

namespace {

struct Needs {
  bool rates = false, rates_b = false, obs = false, phi = false;
  bool grid = false, horizon = false;
};

Needs needs_of(const std::string& name) {
  Needs n;
  if (name == "env-decay" || name == "site-decay-sum") {
    n.grid = true;
  } else if (name == "ep-decay") {
    n.rates = n.obs = n.grid = true;
  } else if (name == "transference") {
    n.rates = n.obs = n.grid = n.phi = true;
  } else if (name == "speed" || name == "diffusion" || name == "oracle-crosscheck") {
    n.rates = n.horizon = true;
  } else if (name == "decoupling") {
    n.rates = n.grid = true;
  } else if (name == "continuity") {
    n.rates = n.rates_b = n.obs = n.horizon = true;
  } else if (name == "torus-doubling") {
    n.grid = true;  // adds the velocity comparison when [rates] is present
  }
  return n;
}

std::string emit_rates(const std::string& sec, const RateSrc& src, int d) {
  std::ostringstream o;
  o << '[' << sec << "]\n";
  if (src.family) {
    o << "family = site_biased\neps = " << fd(src.eps) << "\n\n";
    return o.str();
  }
  o << "jumps =";
  for (const Site& z : src.jumps) o << ' ' << site_repr(z, d);
  o << '\n';
  if (src.any_table) {
    o << "window =";
    for (const Site& x : src.window) o << ' ' << site_repr(x, d);
    o << '\n';
  }
  for (std::size_t i = 0; i < src.specs.size(); ++i) {
    if (src.specs[i].is_table) {
      o << "table." << i << " =";
      for (double v : src.specs[i].table) o << ' ' << fd(v);
      o << '\n';
    } else {
      o << "rate." << i << " = " << fd(src.specs[i].value) << '\n';
    }
  }
  o << '\n';
  return o.str();
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  std::vector<ConfigIssue> issues;
  RawDoc doc = tokenize(text, issues);
  for (const auto& [sec, data] : doc) {
    for (const Entry& e : data.entries) {
      if (!known_key(sec, e.key)) {
        issues.push_back({e.line, e.key_col, "unknown key '" + e.key + "' in [" + sec + "]"});
      }
    }
  }

  Sem s(std::move(doc), issues);
  ExperimentConfig cfg;
  RateSrc ra, rb;
  ObsSrc ob;
  std::string phi_kind = "one";

  // [experiment]
  if (!s.present("experiment")) {
    s.add(0, 0, "missing required section [experiment]");
  } else if (auto name = s.str("experiment", "name")) {
    cfg.experiment = *name;
    if (!find_experiment(*name)) {
      s.add_at(*s.find("experiment", "name"),
               "unknown experiment '" + *name + "' (see 'rwdre list')");
    }
  } else {
    s.add(s.sec_line("experiment"), 1, "missing required key 'name' in [experiment]");
  }
  if (auto st = s.str("experiment", "strategy")) {
    static const char* kStrategies[] = {"extremal", "single_site", "random_pairs", "supremum",
                                        "equal"};
    bool ok = false;
    for (const char* k : kStrategies) {
      if (*st == k) ok = true;
    }
    if (ok) {
      cfg.strategy = *st;
    } else {
      s.add_at(*s.find("experiment", "strategy"),
               "unknown strategy '" + *st +
                   "' (expected extremal, single_site, random_pairs, supremum, or equal)");
    }
  }
  if (auto p = s.integer("experiment", "pairs")) {
    if (*p < 1 || *p > 4096) {
      s.add_at(*s.find("experiment", "pairs"), "pairs must be between 1 and 4096");
    } else {
      cfg.random_pairs = int(*p);
    }
  }

  // [lattice]
  if (!s.present("lattice")) {
    s.add(0, 0, "missing required section [lattice]");
  } else {
    if (auto d = s.integer("lattice", "d")) {
      if (*d < 1 || *d > 3) {
        s.add_at(*s.find("lattice", "d"), "d must be 1, 2, or 3");
      } else {
        cfg.d = int(*d);
      }
    } else if (!s.find("lattice", "d")) {
      s.add(s.sec_line("lattice"), 1, "missing required key 'd' in [lattice]");
    }
    if (auto L = s.integer("lattice", "L")) {
      if (*L < 2) {
        s.add_at(*s.find("lattice", "L"), "L must be >= 2");
      } else {
        cfg.L = *L;
      }
    } else if (!s.find("lattice", "L")) {
      s.add(s.sec_line("lattice"), 1, "missing required key 'L' in [lattice]");
    }
    if (auto w = s.str("lattice", "wrap")) {
      if (*w == "allow") {
        cfg.wrap_allowed = true;
      } else if (*w == "enforce") {
        cfg.wrap_allowed = false;
      } else {
        s.add_at(*s.find("lattice", "wrap"), "wrap must be allow or enforce");
      }
    }
  }

  // [engine]
  if (!s.present("engine")) {
    s.add(0, 0, "missing required section [engine]");
  } else if (auto kind = s.str("engine", "kind")) {
    cfg.engine_kind = *kind;
    if (*kind == "resampling") {
      reject_inapplicable(s, "engine", "kind", *kind, {"lambda"});
    } else if (*kind == "glauber") {
      reject_inapplicable(s, "engine", "kind", *kind, {"beta", "lambda"});
    } else if (*kind == "layered") {
      reject_inapplicable(s, "engine", "kind", *kind, {"order", "layers"});
    } else if (*kind == "frozen") {
      reject_inapplicable(s, "engine", "kind", *kind, {});
    } else {
      s.add_at(*s.find("engine", "kind"),
               "unknown engine kind '" + *kind +
                   "' (expected resampling, glauber, layered, or frozen)");
      cfg.engine_kind.clear();
    }
    if (cfg.engine_kind == "resampling" || cfg.engine_kind == "glauber") {
      if (auto l = s.num("engine", "lambda")) {
        if (*l <= 0) {
          s.add_at(*s.find("engine", "lambda"), "lambda must be > 0");
        } else {
          cfg.lambda = *l;
        }
      }
    }
    if (cfg.engine_kind == "glauber") {
      if (auto b = s.num("engine", "beta")) {
        if (*b < 0) {
          s.add_at(*s.find("engine", "beta"), "beta must be >= 0");
        } else {
          cfg.glauber_beta = *b;
        }
      } else if (!s.find("engine", "beta")) {
        s.add(s.sec_line("engine"), 1, "glauber engine needs 'beta'");
      }
    }
    if (cfg.engine_kind == "layered") {
      bool have = true;
      if (auto o = s.num("engine", "order")) {
        if (*o <= 0) {
          s.add_at(*s.find("engine", "order"), "order must be > 0");
          have = false;
        } else {
          cfg.layer_order = *o;
        }
      } else {
        if (!s.find("engine", "order"))
          s.add(s.sec_line("engine"), 1, "layered engine needs 'order'");
        have = false;
      }
      if (auto n = s.integer("engine", "layers")) {
        if (*n < 1 || *n > 64) {
          s.add_at(*s.find("engine", "layers"), "layers must be between 1 and 64");
          have = false;
        } else {
          cfg.layers = std::uint32_t(*n);
        }
      } else {
        if (!s.find("engine", "layers"))
          s.add(s.sec_line("engine"), 1, "layered engine needs 'layers'");
        have = false;
      }
      if (have) {
        try {
          LayerSpec::power_law(cfg.layer_order, cfg.layers).validate();
        } catch (const Error& e) {
          s.add(s.sec_line("engine"), 1, std::string("layered spec rejected: ") + e.what());
        }
      }
    }
  } else {
    s.add(s.sec_line("engine"), 1, "missing required key 'kind' in [engine]");
  }

  // [rates] / [rates_b]
  build_rates(s, "rates", cfg.d, ra, cfg.rates, cfg.has_rates);
  build_rates(s, "rates_b", cfg.d, rb, cfg.rates_b, cfg.has_rates_b);
  if (cfg.has_rates && cfg.has_rates_b && cfg.rates.jumps != cfg.rates_b.jumps) {
    s.add(s.sec_line("rates_b"), 1, "[rates_b] must declare the same jump set as [rates]");
    cfg.has_rates_b = false;
  }

  // [observable]
  if (s.present("observable")) {
    if (auto kind = s.str("observable", "kind")) {
      ob.kind = *kind;
      auto site_of = [&](const char* key, Site& out) -> bool {
        const Entry* e = s.find("observable", key);
        if (!e) return false;
        std::string err;
        auto v = parse_site_token(e->value, cfg.d, err);
        if (!v) {
          s.add_at(*e, err);
          return false;
        }
        out = *v;
        return true;
      };
      if (*kind == "site_bit") {
        reject_inapplicable(s, "observable", "kind", *kind, {"site"});
        site_of("site", ob.site);
        cfg.observable = LocalFunction::site_bit(ob.site);
        cfg.has_observable = true;
      } else if (*kind == "layer_bit") {
        reject_inapplicable(s, "observable", "kind", *kind, {"site", "layer"});
        site_of("site", ob.site);
        if (auto l = s.integer("observable", "layer")) {
          if (*l < 0 || *l > 63) {
            s.add_at(*s.find("observable", "layer"), "layer must be between 0 and 63");
          } else {
            ob.layer = std::uint32_t(*l);
          }
        }
        cfg.observable = LocalFunction::layer_bit(ob.site, ob.layer);
        cfg.has_observable = true;
      } else if (*kind == "product_bits") {
        reject_inapplicable(s, "observable", "kind", *kind, {"site", "site2"});
        site_of("site", ob.site);
        if (!site_of("site2", ob.site2) && !s.find("observable", "site2")) {
          s.add(s.sec_line("observable"), 1, "product_bits needs 'site2'");
        }
        cfg.observable = LocalFunction::product_bits(ob.site, ob.site2);
        cfg.has_observable = true;
      } else if (*kind == "constant") {
        reject_inapplicable(s, "observable", "kind", *kind, {"value"});
        if (auto v = s.num("observable", "value")) {
          ob.value = *v;
          cfg.observable = LocalFunction::constant(*v);
          cfg.has_observable = true;
        } else if (!s.find("observable", "value")) {
          s.add(s.sec_line("observable"), 1, "constant observable needs 'value'");
        }
      } else {
        s.add_at(*s.find("observable", "kind"),
                 "unknown observable kind '" + *kind +
                     "' (expected site_bit, layer_bit, product_bits, or constant)");
      }
    } else {
      s.add(s.sec_line("observable"), 1, "missing required key 'kind' in [observable]");
    }
  }

  // [time]
  if (s.present("time")) {
    if (const Entry* g = s.find("time", "grid")) cfg.grid = parse_grid(s, *g);
    if (auto h = s.num("time", "horizon")) {
      if (*h <= 0) {
        s.add_at(*s.find("time", "horizon"), "horizon must be > 0");
      } else {
        cfg.horizon = *h;
        cfg.has_horizon = true;
      }
    }
    if (auto b = s.num("time", "burn_in")) {
      if (*b < 0) {
        s.add_at(*s.find("time", "burn_in"), "burn_in must be >= 0");
      } else {
        cfg.burn_in = *b;
      }
    }
    if (auto t = s.num("time", "tau_horizon")) {
      if (*t <= 0) {
        s.add_at(*s.find("time", "tau_horizon"), "tau_horizon must be > 0");
      } else {
        cfg.tau_horizon = *t;
      }
    }
  }

  // [phi]
  if (s.present("phi")) {
    if (auto kind = s.str("phi", "kind")) {
      phi_kind = *kind;
      bool built = false;
      try {
        if (*kind == "one") {
          reject_inapplicable(s, "phi", "kind", *kind, {"k_grid"});
          cfg.phi = Phi::one();
          built = true;
        } else if (*kind == "exp_pow") {
          reject_inapplicable(s, "phi", "kind", *kind, {"beta", "a", "k_grid"});
          auto b = s.num("phi", "beta");
          auto a = s.num("phi", "a");
          if (!s.find("phi", "beta")) s.add(s.sec_line("phi"), 1, "phi exp_pow needs 'beta'");
          if (!s.find("phi", "a")) s.add(s.sec_line("phi"), 1, "phi exp_pow needs 'a'");
          if (b && a) {
            cfg.phi = Phi::exp_pow(*b, *a);
            built = true;
          }
        } else if (*kind == "poly") {
          reject_inapplicable(s, "phi", "kind", *kind, {"b", "k_grid"});
          auto b = s.num("phi", "b");
          if (!s.find("phi", "b")) s.add(s.sec_line("phi"), 1, "phi poly needs 'b'");
          if (b) {
            cfg.phi = Phi::poly(*b);
            built = true;
          }
        } else {
          s.add_at(*s.find("phi", "kind"),
                   "unknown phi kind '" + *kind + "' (expected one, exp_pow, or poly)");
        }
      } catch (const Error& e) {
        s.add(s.sec_line("phi"), 1, std::string("phi rejected: ") + e.what());
        built = false;
      }
      cfg.has_phi = built;
    } else {
      s.add(s.sec_line("phi"), 1, "missing required key 'kind' in [phi]");
    }
    if (const Entry* kg = s.find("phi", "k_grid")) {
      double prev = 0;
      for (const auto& [tok, col] : split_tokens(*kg)) {
        auto v = to_double(tok);
        if (!v) {
          s.add(kg->line, col, "expected a number in k_grid, got '" + tok + "'");
          break;
        }
        if (*v <= prev) {
          s.add(kg->line, col, "k_grid must be positive and strictly increasing");
          break;
        }
        prev = *v;
        cfg.k_grid.push_back(*v);
      }
    }
  }
  if (cfg.k_grid.empty()) cfg.k_grid = {1, 2, 4, 8, 16, 32, 64};

  // [run]
  if (!s.present("run")) {
    s.add(0, 0, "missing required section [run]");
  } else {
    if (auto r = s.uint("run", "replicas")) {
      if (*r < 1) {
        s.add_at(*s.find("run", "replicas"), "replicas must be >= 1");
      } else {
        cfg.replicas = std::size_t(*r);
      }
    } else if (!s.find("run", "replicas")) {
      s.add(s.sec_line("run"), 1, "missing required key 'replicas' in [run]");
    }
    if (auto v = s.uint("run", "seed")) cfg.seed = *v;
    if (auto v = s.uint("run", "tau_replicas")) {
      if (*v < 2) {
        s.add_at(*s.find("run", "tau_replicas"), "tau_replicas must be >= 2");
      } else {
        cfg.tau_replicas = std::size_t(*v);
      }
    }
    if (auto v = s.boolean("run", "dump_trajectories")) cfg.dump_trajectories = *v;
    if (auto v = s.boolean("run", "export_generator")) cfg.export_generator = *v;
  }

  // Per-experiment requirements, checked only once the name resolved.
  if (find_experiment(cfg.experiment)) {
    Needs need = needs_of(cfg.experiment);
    auto need_section = [&](bool flag, const char* sec, bool present) {
      if (flag && !present) {
        s.add(0, 0, std::string("missing required section [") + sec + "] for experiment '" +
                        cfg.experiment + "'");
      }
    };
    need_section(need.rates, "rates", s.present("rates"));
    need_section(need.rates_b, "rates_b", s.present("rates_b"));
    need_section(need.obs, "observable", s.present("observable"));
    need_section(need.phi, "phi", s.present("phi"));
    if (cfg.experiment == "torus-doubling" && s.present("rates")) need.horizon = true;
    if ((need.grid || need.horizon) && !s.present("time")) {
      s.add(0, 0, "missing required section [time] for experiment '" + cfg.experiment + "'");
    } else {
      if (need.grid && !s.find("time", "grid")) {
        s.add(s.sec_line("time"), 1,
              "missing required key 'grid' in [time] for experiment '" + cfg.experiment + "'");
      }
      if (need.horizon && !s.find("time", "horizon")) {
        s.add(s.sec_line("time"), 1,
              "missing required key 'horizon' in [time] for experiment '" + cfg.experiment + "'");
      }
    }
    if (cfg.experiment == "continuity" && cfg.has_horizon && cfg.burn_in >= cfg.horizon) {
      s.add(s.sec_line("time"), 1, "burn_in must be smaller than horizon");
    }
    if (cfg.has_observable && ob.kind == "layer_bit") {
      std::uint32_t n_layers = cfg.engine_kind == "layered" ? cfg.layers : 1;
      if (ob.layer >= n_layers) {
        std::ostringstream m;
        m << "layer " << ob.layer << " out of range for an engine with " << n_layers
          << " layer(s)";
        s.add(s.sec_line("observable"), 1, m.str());
      }
    }
  }

  if (!issues.empty()) {
    std::stable_sort(issues.begin(), issues.end(), [](const ConfigIssue& a, const ConfigIssue& b) {
      int la = a.line <= 0 ? INT_MAX : a.line;
      int lb = b.line <= 0 ? INT_MAX : b.line;
      return la != lb ? la < lb : a.col < b.col;
    });
    throw ConfigError(std::move(issues));
  }

  // Canonical echo: fixed section and key order, shortest round-trip floats.
  std::ostringstream o;
  o << "[experiment]\nname = " << cfg.experiment << "\nstrategy = " << cfg.strategy
    << "\npairs = " << cfg.random_pairs << "\n\n";
  o << "[lattice]\nd = " << cfg.d << "\nL = " << cfg.L
    << "\nwrap = " << (cfg.wrap_allowed ? "allow" : "enforce") << "\n\n";
  o << "[engine]\nkind = " << cfg.engine_kind << '\n';
  if (cfg.engine_kind == "resampling") {
    o << "lambda = " << fd(cfg.lambda) << '\n';
  } else if (cfg.engine_kind == "glauber") {
    o << "beta = " << fd(cfg.glauber_beta) << "\nlambda = " << fd(cfg.lambda) << '\n';
  } else if (cfg.engine_kind == "layered") {
    o << "order = " << fd(cfg.layer_order) << "\nlayers = " << cfg.layers << '\n';
  }
  o << '\n';
  if (cfg.has_rates) o << emit_rates("rates", ra, cfg.d);
  if (cfg.has_rates_b) o << emit_rates("rates_b", rb, cfg.d);
  if (cfg.has_observable) {
    o << "[observable]\nkind = " << ob.kind << '\n';
    if (ob.kind != "constant") o << "site = " << site_repr(ob.site, cfg.d) << '\n';
    if (ob.kind == "product_bits") o << "site2 = " << site_repr(ob.site2, cfg.d) << '\n';
    if (ob.kind == "layer_bit") o << "layer = " << ob.layer << '\n';
    if (ob.kind == "constant") o << "value = " << fd(ob.value) << '\n';
    o << '\n';
  }
  o << "[time]\n";
  if (!cfg.grid.empty()) {
    o << "grid =";
    for (double t : cfg.grid) o << ' ' << fd(t);
    o << '\n';
  }
  if (cfg.has_horizon) o << "horizon = " << fd(cfg.horizon) << '\n';
  o << "burn_in = " << fd(cfg.burn_in) << "\ntau_horizon = " << fd(cfg.tau_horizon) << "\n\n";
  if (cfg.has_phi) {
    o << "[phi]\nkind = " << phi_kind << '\n';
    if (phi_kind == "exp_pow") {
      o << "beta = " << fd(cfg.phi.beta) << "\na = " << fd(cfg.phi.a) << '\n';
    } else if (phi_kind == "poly") {
      o << "b = " << fd(cfg.phi.b) << '\n';
    }
    o << "k_grid =";
    for (double k : cfg.k_grid) o << ' ' << fd(k);
    o << "\n\n";
  }
  o << "[run]\nreplicas = " << cfg.replicas << "\nseed = " << cfg.seed
    << "\ntau_replicas = " << cfg.tau_replicas
    << "\ndump_trajectories = " << (cfg.dump_trajectories ? "true" : "false")
    << "\nexport_generator = " << (cfg.export_generator ? "true" : "false") << '\n';
  cfg.canonical_text = o.str();
  return cfg;
}

std::string override_run_keys(const std::string& text,
                              const std::vector<std::pair<std::string, std::string>>& kv) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      lines.push_back(text.substr(pos));
      break;
    }
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  // Drop a phantom final line created by a trailing newline.
  bool trailing_nl = !text.empty() && text.back() == '\n';
  if (trailing_nl && !lines.empty() && lines.back().empty()) lines.pop_back();

  std::vector<bool> done(kv.size(), false);
  auto pending = [&]() {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < kv.size(); ++i) {
      if (!done[i]) {
        out.push_back(kv[i].first + " = " + kv[i].second);
        done[i] = true;
      }
    }
    return out;
  };

  std::vector<std::string> out;
  bool in_run = false, run_seen = false;
  for (const std::string& line : lines) {
    std::string_view t = trim(line);
    if (!t.empty() && t.front() == '[') {
      if (in_run) {
        for (auto& l : pending()) out.push_back(l);
        in_run = false;
      }
      if (t == "[run]" && !run_seen) {
        in_run = true;
        run_seen = true;
      }
      out.push_back(line);
      continue;
    }
    if (in_run && !t.empty() && t.front() != '#' && t.front() != ';') {
      std::size_t eq = t.find('=');
      if (eq != std::string_view::npos) {
        std::string key(trim(t.substr(0, eq)));
        bool replaced = false;
        for (std::size_t i = 0; i < kv.size(); ++i) {
          if (!done[i] && kv[i].first == key) {
            out.push_back(kv[i].first + " = " + kv[i].second);
            done[i] = true;
            replaced = true;
            break;
          }
        }
        if (replaced) continue;
      }
    }
    out.push_back(line);
  }
  if (in_run) {
    for (auto& l : pending()) out.push_back(l);
  }
  if (!run_seen) {
    if (!out.empty() && !out.back().empty()) out.push_back("");
    out.push_back("[run]");
    for (auto& l : pending()) out.push_back(l);
  }

  std::string joined;
  for (std::size_t i = 0; i < out.size(); ++i) {
    joined += out[i];
    if (i + 1 < out.size() || trailing_nl || !run_seen) joined += '\n';
  }
  return joined;
}

}  // namespace rwdre
