#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

#include "metapu/checkpoint.hpp"
#include "metapu/errors.hpp"
#include "metapu/tasks.hpp"

namespace metapu {

namespace {

void write_matrix(std::string& out, const Matrix& m) {
  out += '[';
  for (ad::Index i = 0; i < m.rows(); ++i) {
    if (i) out += ',';
    out += '[';
    for (ad::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += fmt::format("{:.17g}", m(i, j));
    }
    out += ']';
  }
  out += ']';
}

void write_task(std::string& out, const TaskDataset& t, const char* split) {
  out += fmt::format(R"({{"split":"{}","id":{},"kind":"{}","angle":{:.17g},"true_prior":{:.17g},"positives":)", split,
                     t.id, to_string(t.kind), t.angle, t.true_prior);
  write_matrix(out, t.positives);
  out += R"(,"negatives":)";
  write_matrix(out, t.negatives);
  out += R"(,"unlabeled":)";
  write_matrix(out, t.unlabeled);
  out += R"(,"hidden_unlabeled_labels":[)";
  for (std::size_t i = 0; i < t.hidden_unlabeled_labels.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(t.hidden_unlabeled_labels[i]);
  }
  out += "]}\n";
}

Matrix read_matrix(const nlohmann::json& j, int dim, const char* field, std::size_t line) {
  if (!j.is_array()) throw ParseError(line, fmt::format("field '{}' must be an array of rows", field));
  Matrix m(static_cast<ad::Index>(j.size()), dim);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(dim)) {
      throw SchemaError(fmt::format("line {}: {} row {} has {} values, header declares D = {}", line, field, i,
                                    row.is_array() ? row.size() : 0, dim));
    }
    for (int k = 0; k < dim; ++k) m(static_cast<ad::Index>(i), k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

}  // namespace

void save_tasks(const BenchmarkSplit& split, const std::filesystem::path& path) {
  int dim = 0;
  for (const auto* group : {&split.source, &split.validation, &split.target}) {
    for (const auto& t : *group) {
      if (dim == 0) dim = t.input_dim();
      if (t.input_dim() != dim) {
        throw SchemaError(fmt::format("save_tasks: task {} has D = {}, others have {}", t.id, t.input_dim(), dim));
      }
    }
  }
  std::string out = fmt::format(
      R"({{"format_version":{},"D":{},"counts":{{"source":{},"validation":{},"target":{}}},"seed":{}}})"
      "\n",
      kTaskFormatVersion, dim, split.source.size(), split.validation.size(), split.target.size(), split.seed);
  for (const auto& t : split.source) write_task(out, t, "source");
  for (const auto& t : split.validation) write_task(out, t, "validation");
  for (const auto& t : split.target) write_task(out, t, "target");
  write_file_atomically(path, out);
}

BenchmarkSplit load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open task file {}", path.string()));

  std::string text;
  std::size_t line_no = 0;
  if (!std::getline(in, text)) throw ParseError(1, "missing header line");
  ++line_no;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, e.what());
  }
  if (!header.is_object() || !header.contains("format_version")) {
    throw SchemaError("task file header lacks format_version");
  }
  const int version = header["format_version"].get<int>();
  if (version != kTaskFormatVersion) {
    throw SchemaError(fmt::format("task file format version {} is not supported (expected {})", version,
                                  kTaskFormatVersion));
  }

  BenchmarkSplit split;
  std::size_t expected[3] = {0, 0, 0};
  int dim = 0;
  try {
    dim = header.at("D").get<int>();
    split.seed = header.at("seed").get<std::uint64_t>();
    expected[0] = header.at("counts").at("source").get<std::size_t>();
    expected[1] = header.at("counts").at("validation").get<std::size_t>();
    expected[2] = header.at("counts").at("target").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, fmt::format("malformed header: {}", e.what()));
  }
  if (dim < 1) throw SchemaError(fmt::format("task file header declares D = {}", dim));

  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    TaskDataset t;
    std::string group;
    try {
      group = j.at("split").get<std::string>();
      t.id = j.at("id").get<int>();
      t.kind = generator_kind_from_string(j.at("kind").get<std::string>());
      t.angle = j.at("angle").get<double>();
      t.true_prior = j.at("true_prior").get<double>();
      t.positives = read_matrix(j.at("positives"), dim, "positives", line_no);
      t.negatives = read_matrix(j.at("negatives"), dim, "negatives", line_no);
      t.unlabeled = read_matrix(j.at("unlabeled"), dim, "unlabeled", line_no);
      t.hidden_unlabeled_labels = j.value("hidden_unlabeled_labels", std::vector<int>{});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    if (!t.hidden_unlabeled_labels.empty() &&
        t.hidden_unlabeled_labels.size() != static_cast<std::size_t>(t.unlabeled.rows())) {
      throw SchemaError(fmt::format("line {}: {} hidden labels for {} unlabeled rows", line_no,
                                    t.hidden_unlabeled_labels.size(), t.unlabeled.rows()));
    }
    if (group == "source") {
      split.source.push_back(std::move(t));
    } else if (group == "validation") {
      split.validation.push_back(std::move(t));
    } else if (group == "target") {
      split.target.push_back(std::move(t));
    } else {
      throw ParseError(line_no, fmt::format("unknown split '{}'", group));
    }
  }
  if (split.source.size() != expected[0] || split.validation.size() != expected[1] ||
      split.target.size() != expected[2]) {
    throw ParseError(line_no + 1, fmt::format("header declares {}/{}/{} tasks, file holds {}/{}/{} (truncated?)",
                                              expected[0], expected[1], expected[2], split.source.size(),
                                              split.validation.size(), split.target.size()));
  }
  return split;
}

}  // namespace metapu
