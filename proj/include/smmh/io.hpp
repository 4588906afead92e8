#pragma once

// JSON persistence. Models are one JSON document with states numbered from 1
// and matrices as row-major nested arrays; episodes and state paths are JSON
// lines. Masked mark values are written as null and read back as 0.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "smmh/errors.hpp"
#include "smmh/process_model.hpp"

namespace smmh {

using json = nlohmann::json;

class FormatError : public Error {
 public:
  using Error::Error;
};

namespace io_detail {

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::VectorXd vector_from(const json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t k = 0; k < j.size(); ++k) v(static_cast<Eigen::Index>(k)) = j[k].get<double>();
  return v;
}

inline Eigen::MatrixXd matrix_from(const json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw FormatError(std::string(what) + ": ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace io_detail

inline json model_to_json(const ModelParams& p) {
  json j;
  j["n_states"] = p.n_states;
  j["channels"] = p.channels();
  j["transition"] = io_detail::to_json(p.transition);
  j["initial"] = io_detail::to_json(p.initial);
  json states = json::array();
  for (std::size_t i = 0; i < p.states.size(); ++i) {
    const auto& s = p.states[i];
    json js;
    js["state"] = i + 1;
    js["gamma"] = {{"shape", s.gamma.shape}, {"scale", s.gamma.scale}};
    js["hawkes"] = {{"base_rate", s.hawkes.base_rate}, {"excitation", s.hawkes.excitation}, {"decay", s.hawkes.decay}};
    js["gp"] = {{"mean", io_detail::to_json(s.gp.mean)},
                {"smoothness", s.gp.smoothness},
                {"length_scale", s.gp.length_scale},
                {"channel_cov", io_detail::to_json(s.gp.channel_cov)},
                {"jitter", s.gp.jitter}};
    states.push_back(std::move(js));
  }
  j["states"] = std::move(states);
  return j;
}

inline ModelParams model_from_json(const json& j) {
  try {
    ModelParams p;
    p.n_states = j.at("n_states").get<int>();
    p.transition = io_detail::matrix_from(j.at("transition"), "transition");
    p.initial = io_detail::vector_from(j.at("initial"), "initial");
    const auto& states = j.at("states");
    if (!states.is_array()) throw FormatError("states: expected an array");
    p.states.resize(states.size());
    std::vector<bool> seen(states.size(), false);
    for (std::size_t k = 0; k < states.size(); ++k) {
      const auto& js = states[k];
      const int idx = js.contains("state") ? js.at("state").get<int>() - 1 : static_cast<int>(k);
      if (idx < 0 || idx >= static_cast<int>(states.size()) || seen[static_cast<std::size_t>(idx)])
        throw FormatError("states: bad or duplicate state number");
      seen[static_cast<std::size_t>(idx)] = true;
      auto& s = p.states[static_cast<std::size_t>(idx)];
      s.gamma = {js.at("gamma").at("shape").get<double>(), js.at("gamma").at("scale").get<double>()};
      const auto& h = js.at("hawkes");
      s.hawkes = {h.at("base_rate").get<double>(), h.at("excitation").get<double>(), h.at("decay").get<double>()};
      const auto& g = js.at("gp");
      s.gp.mean = io_detail::vector_from(g.at("mean"), "gp.mean");
      s.gp.smoothness = g.at("smoothness").get<int>();
      s.gp.length_scale = g.at("length_scale").get<double>();
      s.gp.channel_cov = io_detail::matrix_from(g.at("channel_cov"), "gp.channel_cov");
      s.gp.jitter = g.contains("jitter") ? g.at("jitter").get<double>() : default_jitter(s.gp.channel_cov);
    }
    return p;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model JSON: ") + e.what());
  }
}

inline json episode_to_json(const Episode& ep) {
  json j;
  j["id"] = ep.id;
  json events = json::array();
  for (const auto& ev : ep.events) {
    json y = json::array(), mask = json::array();
    for (Eigen::Index r = 0; r < ev.y.size(); ++r) {
      const bool present = ev.mask[static_cast<std::size_t>(r)];
      mask.push_back(present);
      if (present) {
        y.push_back(ev.y(r));
      } else {
        y.push_back(nullptr);
      }
    }
    events.push_back({{"t", ev.t}, {"y", std::move(y)}, {"mask", std::move(mask)}});
  }
  j["events"] = std::move(events);
  j["censor_time"] = ep.censor_time;
  j["label"] = ep.label;
  return j;
}

inline Episode episode_from_json(const json& j) {
  try {
    Episode ep;
    ep.id = j.at("id").get<std::string>();
    ep.censor_time = j.at("censor_time").get<double>();
    ep.label = j.at("label").get<int>();
    for (const auto& je : j.at("events")) {
      Event ev;
      ev.t = je.at("t").get<double>();
      const auto& y = je.at("y");
      ev.y.resize(static_cast<Eigen::Index>(y.size()));
      ev.mask.assign(y.size(), true);
      if (je.contains("mask")) {
        const auto& mask = je.at("mask");
        if (mask.size() != y.size()) throw FormatError("episode " + ep.id + ": mask and y differ in length");
        for (std::size_t r = 0; r < y.size(); ++r) ev.mask[r] = mask[r].get<bool>();
      }
      for (std::size_t r = 0; r < y.size(); ++r) {
        if (y[r].is_null()) {
          ev.mask[r] = false;
          ev.y(static_cast<Eigen::Index>(r)) = 0.0;
        } else {
          ev.y(static_cast<Eigen::Index>(r)) = ev.mask[r] ? y[r].get<double>() : 0.0;
        }
      }
      ep.events.push_back(std::move(ev));
    }
    return ep;
  } catch (const json::exception& e) {
    throw FormatError(std::string("episode JSON: ") + e.what());
  }
}

// States are written 1-based.
inline json path_to_json(const std::string& id, const StatePath& path) {
  std::vector<int> states;
  for (int s : path.states) states.push_back(s + 1);
  return {{"id", id}, {"states", states}, {"sojourns", path.sojourns}, {"jump_times", path.jump_times}};
}

inline std::pair<std::string, StatePath> path_from_json(const json& j) {
  try {
    StatePath p;
    for (int s : j.at("states").get<std::vector<int>>()) p.states.push_back(s - 1);
    p.sojourns = j.at("sojourns").get<std::vector<double>>();
    p.jump_times = j.at("jump_times").get<std::vector<double>>();
    return {j.at("id").get<std::string>(), p};
  } catch (const json::exception& e) {
    throw FormatError(std::string("state path JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Files.

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes via a temporary file in the same directory and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline ModelParams load_model(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p) {
  write_atomic(path, model_to_json(p).dump(2) + "\n");
}

template <class T, class Fn>
std::vector<T> read_jsonl(const std::filesystem::path& path, Fn&& convert) {
  std::istringstream in(read_text(path));
  std::vector<T> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(convert(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Episode> load_episodes(const std::filesystem::path& path) {
  return read_jsonl<Episode>(path, [](const json& j) { return episode_from_json(j); });
}

inline std::string episodes_to_jsonl(const std::vector<Episode>& episodes) {
  std::string out;
  for (const auto& ep : episodes) out += episode_to_json(ep).dump() + "\n";
  return out;
}

inline void save_episodes(const std::filesystem::path& path, const std::vector<Episode>& episodes) {
  write_atomic(path, episodes_to_jsonl(episodes));
}

inline std::vector<std::pair<std::string, StatePath>> load_paths(const std::filesystem::path& path) {
  return read_jsonl<std::pair<std::string, StatePath>>(path, [](const json& j) { return path_from_json(j); });
}

}  // namespace smmh
