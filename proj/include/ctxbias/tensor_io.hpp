#pragma once

// Self-describing JSON container for named 2-D tensors plus a flat metadata
// map. Used for both model checkpoints and encoder feature files. Doubles are
// serialized with shortest round-trip formatting, so save -> load reproduces
// every value bit for bit.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ctxbias/core.hpp"

namespace ctxbias {

inline constexpr const char* kTensorFormat = "ctxbias-tensors-v1";

struct TensorFile {
  std::map<std::string, nlohmann::json> meta;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  void add(std::string name, const Eigen::MatrixXd& value) {
    tensors.emplace_back(std::move(name), value);
  }

  const Eigen::MatrixXd& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw ParseError("tensor file has no tensor named '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  void save(const std::string& path) const {
    nlohmann::json doc;
    doc["format"] = kTensorFormat;
    doc["meta"] = nlohmann::json::object();
    for (const auto& [k, v] : meta) doc["meta"][k] = v;
    doc["tensors"] = nlohmann::json::array();
    for (const auto& [name, m] : tensors) {
      nlohmann::json t;
      t["name"] = name;
      t["shape"] = {m.rows(), m.cols()};
      std::vector<double> data;
      data.reserve(static_cast<std::size_t>(m.size()));
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
      t["data"] = std::move(data);
      doc["tensors"].push_back(std::move(t));
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write tensor file: " + path);
    out << doc.dump() << '\n';
  }

  static TensorFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open tensor file: " + path);
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("bad tensor file " + path + ": " + e.what());
    }
    if (doc.value("format", "") != kTensorFormat)
      throw ParseError("unexpected tensor file format in " + path);
    TensorFile f;
    for (auto it = doc["meta"].begin(); it != doc["meta"].end(); ++it) f.meta[it.key()] = *it;
    for (const auto& t : doc["tensors"]) {
      const auto& shape = t["shape"];
      Eigen::Index rows = shape[0].get<Eigen::Index>();
      Eigen::Index cols = shape[1].get<Eigen::Index>();
      const auto& data = t["data"];
      if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw ParseError("tensor '" + t["name"].get<std::string>() + "' shape/data mismatch");
      Eigen::MatrixXd m(rows, cols);
      std::size_t i = 0;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++].get<double>();
      f.tensors.emplace_back(t["name"].get<std::string>(), std::move(m));
    }
    return f;
  }
};

inline void save_features(const std::string& path, const EncoderFeatures& features,
                          std::map<std::string, nlohmann::json> meta = {}) {
  TensorFile f;
  f.meta = std::move(meta);
  f.add("features", features.frames);
  f.save(path);
}

inline EncoderFeatures load_features(const std::string& path) {
  TensorFile f = TensorFile::load(path);
  EncoderFeatures feat{f.get("features")};
  feat.validate();
  return feat;
}

}  // namespace ctxbias
