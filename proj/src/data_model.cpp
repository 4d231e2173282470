#include "crbjm/data_model.hpp"

#include "crbjm/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace crbjm {

std::size_t Subject::n_measurements() const noexcept {
  std::size_t n = 0;
  for (const auto& series : measurements) n += series.size();
  return n;
}

std::size_t History::n_measurements() const noexcept {
  std::size_t n = 0;
  for (const auto& series : measurements) n += series.size();
  return n;
}

History History::from_subject(const Subject& subject, double s) {
  History h;
  h.covariates = subject.covariates;
  h.prediction_time = s;
  h.measurements.resize(subject.measurements.size());
  for (std::size_t m = 0; m < subject.measurements.size(); ++m) {
    for (const auto& obs : subject.measurements[m]) {
      if (obs.time <= s) h.measurements[m].push_back(obs);
    }
  }
  return h;
}

namespace {

double max_event_time(const std::vector<Subject>& subjects) {
  double tau = 0.0;
  for (const auto& s : subjects) {
    if (!s.censored()) tau = std::max(tau, s.observed_time);
  }
  return tau;
}

}  // namespace

Dataset::Dataset(std::vector<Subject> subjects, int n_event_types,
                 std::vector<std::string> covariate_names,
                 std::vector<std::string> biomarker_names,
                 std::optional<double> tau_max_override)
    : subjects_(std::move(subjects)),
      n_event_types_(n_event_types),
      covariate_names_(std::move(covariate_names)),
      biomarker_names_(std::move(biomarker_names)),
      tau_override_(tau_max_override) {
  if (n_event_types_ < 1) {
    throw Error(ErrorCode::EventTypeOutOfRange, "number of event types must be >= 1");
  }
  const auto p = static_cast<Eigen::Index>(covariate_names_.size());
  const auto n_markers = biomarker_names_.size();
  for (auto& s : subjects_) {
    if (s.covariates.size() != p) {
      throw Error(ErrorCode::ParseError, "covariate vector length differs from the covariate manifest", s.id);
    }
    if (!(s.observed_time > 0.0) || !std::isfinite(s.observed_time)) {
      throw Error(ErrorCode::NonPositiveTime, "observed time must be positive", s.id);
    }
    if (s.event_type < 0 || s.event_type > n_event_types_) {
      throw Error(ErrorCode::EventTypeOutOfRange,
                  "event type " + std::to_string(s.event_type) + " outside 0.." +
                      std::to_string(n_event_types_),
                  s.id);
    }
    if (s.measurements.size() < n_markers) s.measurements.resize(n_markers);
    if (s.measurements.size() != n_markers) {
      throw Error(ErrorCode::ParseError, "biomarker count differs from the biomarker manifest", s.id);
    }
    for (auto& series : s.measurements) {
      std::stable_sort(series.begin(), series.end(),
                       [](const Measurement& a, const Measurement& b) { return a.time < b.time; });
      for (std::size_t k = 0; k < series.size(); ++k) {
        const double t = series[k].time;
        if (!(t > 0.0)) throw Error(ErrorCode::NonPositiveTime, "measurement time must be positive", s.id);
        if (t > s.observed_time) {
          throw Error(ErrorCode::MeasurementAfterExit,
                      "measurement at " + format_double(t) + " after observed time " +
                          format_double(s.observed_time),
                      s.id);
        }
        if (k > 0 && series[k - 1].time == t) {
          throw Error(ErrorCode::DuplicateMeasurement, "two measurements at time " + format_double(t), s.id);
        }
      }
    }
  }
  const double observed_max = max_event_time(subjects_);
  tau_max_ = observed_max;
  if (tau_override_) {
    if (*tau_override_ < observed_max) {
      throw Error(ErrorCode::InvalidTauMax, "tau_max override " + format_double(*tau_override_) +
                                                " is below the largest observed event time " +
                                                format_double(observed_max));
    }
    tau_max_ = *tau_override_;
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<Subject> picked;
  picked.reserve(indices.size());
  std::unordered_map<std::size_t, int> seen;
  for (auto i : indices) {
    Subject s = subjects_.at(i);
    const int k = seen[i]++;
    if (k > 0) s.id += "#" + std::to_string(k);
    picked.push_back(std::move(s));
  }
  return Dataset(std::move(picked), n_event_types_, covariate_names_, biomarker_names_, tau_override_);
}

std::string Dataset::content_hash() const {
  std::ostringstream os;
  write_subjects_csv(*this, os);
  write_longitudinal_csv(*this, os);
  const std::string text = os.str();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream hex;
  hex << std::hex;
  hex.width(16);
  hex.fill('0');
  hex << h;
  return hex.str();
}

LtsSplit split_lts(const Dataset& data) {
  LtsSplit split;
  const double tau = data.tau_max();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (beyond_tau(s, tau)) {
      split.lts.push_back(i);
    } else if (s.censored()) {
      split.censored_before_tau.push_back(i);
    } else {
      split.non_lts.push_back(i);
    }
  }
  return split;
}

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// CSV

std::size_t CsvTable::column(const std::string& name) const {
  auto idx = find_column(name);
  if (!idx) throw Error(ErrorCode::ParseError, "missing column '" + name + "'");
  return *idx;
}

std::optional<std::size_t> CsvTable::find_column(const std::string& name) const {
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (header[k] == name) return k;
  }
  return std::nullopt;
}

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur.push_back('"');
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw Error(ErrorCode::ParseError, "unterminated quote on line " + std::to_string(line_no));
  fields.push_back(trim(cur));
  return fields;
}

}  // namespace

CsvTable read_csv(std::istream& in) {
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
        static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
      line.erase(0, 3);
    }
    if (trim(line).empty()) continue;
    auto fields = split_record(line, line_no);
    if (!have_header) {
      table.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + " has " +
                                             std::to_string(fields.size()) + " fields, header has " +
                                             std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(fields));
    table.line_numbers.push_back(line_no);
  }
  if (!have_header) throw Error(ErrorCode::ParseError, "missing header row");
  return table;
}

double parse_double(const std::string& text, std::size_t line, const std::string& what) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last || !std::isfinite(value)) {
    throw Error(ErrorCode::ParseError,
                "cannot parse " + what + " '" + text + "' on line " + std::to_string(line));
  }
  return value;
}

namespace {

int parse_int(const std::string& text, std::size_t line, const std::string& what) {
  const double v = parse_double(text, line, what);
  if (v != std::floor(v)) {
    throw Error(ErrorCode::ParseError, what + " must be an integer on line " + std::to_string(line));
  }
  return static_cast<int>(v);
}

}  // namespace

Dataset read_dataset(std::istream& subjects_in, std::istream& longitudinal_in, const Schema& schema) {
  const CsvTable subj = read_csv(subjects_in);
  const CsvTable lng = read_csv(longitudinal_in);

  const auto id_col = subj.column(schema.id_column);
  const auto time_col = subj.column(schema.time_column);
  const auto event_col = subj.column(schema.event_column);

  std::vector<std::string> cov_names = schema.covariate_columns;
  if (cov_names.empty()) {
    for (std::size_t k = 0; k < subj.header.size(); ++k) {
      if (k != id_col && k != time_col && k != event_col) cov_names.push_back(subj.header[k]);
    }
  }
  std::vector<std::size_t> cov_cols;
  for (const auto& name : cov_names) cov_cols.push_back(subj.column(name));

  std::vector<Subject> subjects;
  std::unordered_map<std::string, std::size_t> by_id;
  int max_event = 0;
  for (std::size_t r = 0; r < subj.rows.size(); ++r) {
    const auto& row = subj.rows[r];
    const auto line = subj.line_numbers[r];
    Subject s;
    s.id = row[id_col];
    if (by_id.count(s.id)) throw Error(ErrorCode::ParseError, "duplicate subject id on line " + std::to_string(line), s.id);
    s.observed_time = parse_double(row[time_col], line, "time");
    if (!(s.observed_time > 0.0)) throw Error(ErrorCode::NonPositiveTime, "observed time must be positive", s.id);
    s.event_type = parse_int(row[event_col], line, "event");
    if (s.event_type < 0) throw Error(ErrorCode::EventTypeOutOfRange, "negative event type", s.id);
    max_event = std::max(max_event, s.event_type);
    s.covariates.resize(static_cast<Eigen::Index>(cov_cols.size()));
    for (std::size_t k = 0; k < cov_cols.size(); ++k) {
      s.covariates(static_cast<Eigen::Index>(k)) = parse_double(row[cov_cols[k]], line, cov_names[k]);
    }
    by_id.emplace(s.id, subjects.size());
    subjects.push_back(std::move(s));
  }
  const int n_types = schema.n_event_types.value_or(std::max(1, max_event));
  if (max_event > n_types) {
    throw Error(ErrorCode::EventTypeOutOfRange, "event type " + std::to_string(max_event) +
                                                    " exceeds configured J = " + std::to_string(n_types));
  }

  const auto lid = lng.column("id");
  const auto lmarker = lng.column("biomarker");
  const auto ltime = lng.column("time");
  const auto lvalue = lng.column("value");

  std::vector<std::string> markers = schema.biomarkers;
  std::map<std::string, std::size_t> marker_index;
  for (std::size_t m = 0; m < markers.size(); ++m) marker_index.emplace(markers[m], m);
  if (markers.empty()) {
    for (const auto& row : lng.rows) {
      if (!marker_index.count(row[lmarker])) {
        marker_index.emplace(row[lmarker], markers.size());
        markers.push_back(row[lmarker]);
      }
    }
  }
  for (auto& s : subjects) s.measurements.resize(markers.size());

  for (std::size_t r = 0; r < lng.rows.size(); ++r) {
    const auto& row = lng.rows[r];
    const auto line = lng.line_numbers[r];
    auto it = by_id.find(row[lid]);
    if (it == by_id.end()) {
      throw Error(ErrorCode::MissingSubject, "longitudinal row on line " + std::to_string(line) +
                                                 " references an unknown subject", row[lid]);
    }
    auto mit = marker_index.find(row[lmarker]);
    if (mit == marker_index.end()) {
      throw Error(ErrorCode::ParseError, "unknown biomarker '" + row[lmarker] + "' on line " + std::to_string(line));
    }
    Subject& s = subjects[it->second];
    double t = parse_double(row[ltime], line, "time");
    if (t < 0.0) throw Error(ErrorCode::NonPositiveTime, "negative measurement time on line " + std::to_string(line), s.id);
    if (t == 0.0) t = schema.zero_time_shift;
    if (t > s.observed_time) {
      throw Error(ErrorCode::MeasurementAfterExit,
                  "measurement at " + format_double(t) + " after observed time " + format_double(s.observed_time),
                  s.id);
    }
    s.measurements[mit->second].push_back({t, parse_double(row[lvalue], line, "value")});
  }
  return Dataset(std::move(subjects), n_types, std::move(cov_names), std::move(markers), schema.tau_max);
}

Dataset load_dataset(const std::filesystem::path& subjects_file,
                     const std::filesystem::path& longitudinal_file, const Schema& schema) {
  std::ifstream subj(subjects_file);
  if (!subj) throw Error(ErrorCode::ParseError, "cannot open " + subjects_file.string());
  std::ifstream lng(longitudinal_file);
  if (!lng) throw Error(ErrorCode::ParseError, "cannot open " + longitudinal_file.string());
  return read_dataset(subj, lng, schema);
}

void write_subjects_csv(const Dataset& data, std::ostream& out) {
  out << "id,time,event";
  for (const auto& name : data.covariate_names()) out << ',' << name;
  out << '\n';
  for (const auto& s : data.subjects()) {
    out << s.id << ',' << format_double(s.observed_time) << ',' << s.event_type;
    for (Eigen::Index k = 0; k < s.covariates.size(); ++k) out << ',' << format_double(s.covariates(k));
    out << '\n';
  }
}

void write_longitudinal_csv(const Dataset& data, std::ostream& out) {
  out << "id,biomarker,time,value\n";
  for (const auto& s : data.subjects()) {
    for (std::size_t m = 0; m < s.measurements.size(); ++m) {
      for (const auto& obs : s.measurements[m]) {
        out << s.id << ',' << data.biomarker_names()[m] << ',' << format_double(obs.time) << ','
            << format_double(obs.value) << '\n';
      }
    }
  }
}

}  // namespace crbjm
