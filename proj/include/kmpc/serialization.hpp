#pragma once

// JSON encoding of matrices, identified models, snapshot datasets and QP
// problems. Matrices are {"rows": r, "cols": c, "data": [[row 0], [row 1], ...]}.
// Infinite values (QP bounds) are written as the strings "inf" / "-inf".

#include "kmpc/common.hpp"
#include "kmpc/koopman.hpp"
#include "kmpc/qp_solver.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace kmpc {

using Json = nlohmann::json;

inline constexpr const char* kModelFormat = "kmpc.koopman_model";
inline constexpr const char* kDatasetFormat = "kmpc.snapshot_dataset";
inline constexpr const char* kQpFormat = "kmpc.qp_problem";
inline constexpr int kFormatVersion = 1;

namespace detail {

inline Json encode_scalar(double v) {
  if (std::isnan(v)) throw Error("cannot serialize NaN");
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double decode_scalar(const Json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
  }
  throw Error("expected a number, got " + j.dump());
}

inline const Json& field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw Error(std::string("missing JSON field '") + key + "'");
  return j.at(key);
}

inline void check_format(const Json& j, const char* format) {
  if (field(j, "format").get<std::string>() != format)
    throw Error(std::string("expected format '") + format + "', got '" + j.at("format").get<std::string>() + "'");
  if (field(j, "version").get<int>() != kFormatVersion)
    throw Error("unsupported format version " + j.at("version").dump());
}

}  // namespace detail

inline Json matrix_to_json(const MatX& m) {
  Json data = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(detail::encode_scalar(m(i, j)));
    data.push_back(std::move(row));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline MatX matrix_from_json(const Json& j) {
  const auto rows = detail::field(j, "rows").get<Eigen::Index>();
  const auto cols = detail::field(j, "cols").get<Eigen::Index>();
  const Json& data = detail::field(j, "data");
  if (rows < 0 || cols < 0) throw DimensionError("negative matrix dimensions");
  if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != rows)
    throw DimensionError("matrix row count does not match 'rows'");
  MatX m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = data[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw DimensionError("matrix row " + std::to_string(i) + " does not have 'cols' entries");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = detail::decode_scalar(row[static_cast<std::size_t>(k)]);
  }
  return m;
}

/// Column vectors are stored as r x 1 matrices.
inline Json vector_to_json(const VecX& v) { return matrix_to_json(v); }

inline VecX vector_from_json(const Json& j) {
  const MatX m = matrix_from_json(j);
  if (m.cols() != 1 && m.rows() != 0) throw DimensionError("expected a column vector");
  return m.rows() == 0 ? VecX() : VecX(m.col(0));
}

inline Json model_to_json(const KoopmanModel& m) {
  m.validate();
  return {{"format", kModelFormat},
          {"version", kFormatVersion},
          {"dict_order", m.dict_order},
          {"dt", m.dt},
          {"state_dim", m.C_x.rows()},
          {"lift_dim", m.A.rows()},
          {"control_dim", m.B.cols()},
          {"training_residual", m.training_residual},
          {"training_samples", m.training_samples},
          {"A", matrix_to_json(m.A)},
          {"B", matrix_to_json(m.B)},
          {"C_x", matrix_to_json(m.C_x)}};
}

inline KoopmanModel model_from_json(const Json& j) {
  detail::check_format(j, kModelFormat);
  KoopmanModel m;
  m.dict_order = detail::field(j, "dict_order").get<int>();
  m.dt = detail::field(j, "dt").get<double>();
  m.A = matrix_from_json(detail::field(j, "A"));
  m.B = matrix_from_json(detail::field(j, "B"));
  m.C_x = matrix_from_json(detail::field(j, "C_x"));
  if (j.contains("training_residual")) m.training_residual = j.at("training_residual").get<double>();
  if (j.contains("training_samples")) m.training_samples = j.at("training_samples").get<std::size_t>();
  require_dims(detail::field(j, "lift_dim").get<Eigen::Index>() == m.A.rows(), "lift_dim vs A");
  require_dims(detail::field(j, "control_dim").get<Eigen::Index>() == m.B.cols(), "control_dim vs B");
  require_dims(detail::field(j, "state_dim").get<Eigen::Index>() == m.C_x.rows(), "state_dim vs C_x");
  require_dims(m.A.rows() == lift_dim(m.dict_order), "lift_dim vs dict_order");
  m.validate();
  return m;
}

inline Json dataset_to_json(const SnapshotDataset& d) {
  d.validate();
  return {{"format", kDatasetFormat},
          {"version", kFormatVersion},
          {"dt", d.dt},
          {"num_samples", d.size()},
          {"X", matrix_to_json(d.X)},
          {"Y", matrix_to_json(d.Y)},
          {"U", matrix_to_json(d.U)}};
}

inline SnapshotDataset dataset_from_json(const Json& j) {
  detail::check_format(j, kDatasetFormat);
  SnapshotDataset d;
  d.dt = detail::field(j, "dt").get<double>();
  d.X = matrix_from_json(detail::field(j, "X"));
  d.Y = matrix_from_json(detail::field(j, "Y"));
  d.U = matrix_from_json(detail::field(j, "U"));
  d.validate();
  require_dims(detail::field(j, "num_samples").get<Eigen::Index>() == d.size(), "num_samples vs X");
  return d;
}

inline Json qp_to_json(const QpProblem& p) {
  return {{"format", kQpFormat},
          {"version", kFormatVersion},
          {"H", matrix_to_json(p.H)},
          {"P", vector_to_json(p.P)},
          {"C", matrix_to_json(p.C)},
          {"c_lo", vector_to_json(p.c_lo)},
          {"c_hi", vector_to_json(p.c_hi)}};
}

inline QpProblem qp_from_json(const Json& j) {
  detail::check_format(j, kQpFormat);
  return QpProblem::make(matrix_from_json(detail::field(j, "H")), vector_from_json(detail::field(j, "P")),
                         matrix_from_json(detail::field(j, "C")), vector_from_json(detail::field(j, "c_lo")),
                         vector_from_json(detail::field(j, "c_hi")));
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j, int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(indent) << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline KoopmanModel load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }
inline void save_model(const std::filesystem::path& path, const KoopmanModel& m) {
  write_json_file(path, model_to_json(m));
}
inline SnapshotDataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_json(read_json_file(path));
}
inline void save_dataset(const std::filesystem::path& path, const SnapshotDataset& d) {
  write_json_file(path, dataset_to_json(d));
}

}  // namespace kmpc
