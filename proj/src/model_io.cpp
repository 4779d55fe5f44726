#include "latentq/model_io.hpp"

#include <fstream>

namespace latentq {

namespace {

using nlohmann::json;

json row_major(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

json to_array(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Vector vector_from(const json& j, const char* key) {
  const json& a = j.at(key);
  if (!a.is_array()) throw ModelError(std::string("model field '") + key + "' must be an array");
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

Matrix matrix_from(const json& j, const char* key, Eigen::Index rows, Eigen::Index cols) {
  const Vector flat = vector_from(j, key);
  if (flat.size() != rows * cols) {
    throw ModelError(std::string("model field '") + key + "' has " + std::to_string(flat.size()) + " entries, expected " +
                     std::to_string(rows * cols));
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[r * cols + c];
  return m;
}

}  // namespace

json model_to_json(const StoredModel& model) {
  const ModelParams& p = model.params;
  json j;
  j["d"] = p.dim();
  j["field_names"] = p.field_names;
  json kinds = json::array();
  for (FieldKind k : p.field_kinds) kinds.push_back(std::string(to_string(k)));
  j["field_kinds"] = kinds;
  j["A"] = row_major(p.basis);
  j["b"] = to_array(p.intercept);
  j["sigma"] = to_array(p.sigma);
  j["mu0"] = to_array(model.prior.mean());
  j["Sigma0"] = row_major(model.prior.covariance());
  j["metadata"] = model.metadata;
  return j;
}

StoredModel model_from_json(const json& j) {
  try {
    const auto d = static_cast<Eigen::Index>(j.at("d").get<std::size_t>());
    ModelParams p;
    p.field_names = j.at("field_names").get<std::vector<std::string>>();
    for (const auto& k : j.at("field_kinds")) p.field_kinds.push_back(parse_field_kind(k.get<std::string>()));
    const auto rows = static_cast<Eigen::Index>(p.field_names.size());
    p.basis = matrix_from(j, "A", rows, d);
    p.intercept = vector_from(j, "b");
    p.sigma = vector_from(j, "sigma");
    p.validate();
    LatentPrior prior(vector_from(j, "mu0"), matrix_from(j, "Sigma0", d, d));
    if (prior.dim() != p.dim()) throw ModelError("prior dimension does not match d");
    json meta = j.contains("metadata") ? j.at("metadata") : json::object();
    return StoredModel{std::move(p), std::move(prior), std::move(meta)};
  } catch (const json::exception& e) {
    throw ModelError(std::string("malformed model JSON: ") + e.what());
  } catch (const DataError& e) {
    throw ModelError(std::string("malformed model JSON: ") + e.what());
  }
}

void save_model(const StoredModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  out << model_to_json(model).dump(2) << '\n';
  if (!out) throw ModelError("failed writing " + path.string());
}

StoredModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ModelError(path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace latentq
