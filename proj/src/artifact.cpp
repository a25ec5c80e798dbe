#include "fewshot/artifact.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fewshot {

namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'S', 'G', 'M', 'C', 'K', '0', '1'};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw FormatError("expected a non-empty matrix");
  Eigen::MatrixXd m(j.size(), j[0].size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != j[0].size()) throw FormatError("ragged matrix rows");
    for (std::size_t k = 0; k < j[i].size(); ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

nlohmann::json scaler_to_json(const Scaler& s) {
  return {{"scale", s.scale}, {"clip_hi", s.clip_hi}};
}

Scaler scaler_from_json(const nlohmann::json& j) {
  return Scaler{j.at("scale").get<double>(), j.at("clip_hi").get<double>()};
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.write(buf, 4);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  char buf[4];
  in.read(buf, 4);
  if (!in) throw FormatError("truncated checkpoint");
  std::memcpy(&v, buf, 4);
  return v;
}

void write_block(std::ostream& out, const std::string& name, int rows, int cols,
                 const Eigen::ArrayXd& data) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<std::uint32_t>(rows));
  write_u32(out, static_cast<std::uint32_t>(cols));
  std::vector<float> f(static_cast<std::size_t>(data.size()));
  for (Eigen::Index i = 0; i < data.size(); ++i)
    f[static_cast<std::size_t>(i)] = static_cast<float>(data(i));
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

struct Block {
  std::string name;
  int rows = 0;
  int cols = 0;
  Eigen::ArrayXd data;
};

Block read_block(std::istream& in) {
  Block b;
  const std::uint32_t name_len = read_u32(in);
  b.name.resize(name_len);
  in.read(b.name.data(), name_len);
  b.rows = static_cast<int>(read_u32(in));
  b.cols = static_cast<int>(read_u32(in));
  std::vector<float> f(static_cast<std::size_t>(b.rows) * b.cols);
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!in) throw FormatError("truncated checkpoint block");
  b.data.resize(static_cast<Eigen::Index>(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i)
    b.data(static_cast<Eigen::Index>(i)) = static_cast<double>(f[i]);
  return b;
}

void write_split_csv(const std::string& path, const DomainCollection& c, int T) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write split file: " + path);
  out << "domain_id,household_id,day_of_year";
  for (int t = 0; t < T; ++t) out << ",v" << t;
  out << "\n";
  for (const auto& d : c.domains)
    for (const auto& s : d.samples) {
      out << d.domain_id << "," << d.source_household_id << "," << s.day_of_year;
      for (double v : s.values) out << "," << format_double(v);
      out << "\n";
    }
}

}  // namespace

DomainCollection read_split_csv(const std::string& path, int T, RoleTag tag) {
  DomainCollection c;
  c.role_tag = tag;
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read split file: " + path);
  std::string line;
  std::getline(in, line);  // header
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (static_cast<int>(f.size()) != T + 3)
      throw FormatError("bad split row width in " + path);
    auto it = index.find(f[0]);
    if (it == index.end()) {
      index.emplace(f[0], c.domains.size());
      Domain d;
      d.domain_id = f[0];
      d.source_household_id = f[1];
      c.domains.push_back(std::move(d));
      it = index.find(f[0]);
    }
    EcpSample s;
    s.day_of_year = std::stoi(f[2]);
    s.values.resize(T);
    for (int t = 0; t < T; ++t) s.values[t] = std::stod(f[3 + t]);
    c.domains[it->second].samples.push_back(std::move(s));
  }
  return c;
}

nlohmann::json gmm_to_json(const SphericalGmm& gmm) {
  nlohmann::json j;
  j["J"] = gmm.J;
  j["T"] = gmm.T;
  nlohmann::json w = nlohmann::json::array();
  for (int i = 0; i < gmm.J; ++i) w.push_back(gmm.weights(i));
  j["weights"] = std::move(w);
  j["means"] = matrix_to_json(gmm.means);
  j["sigmas"] = matrix_to_json(gmm.sigmas);
  return j;
}

SphericalGmm gmm_from_json(const nlohmann::json& j) {
  SphericalGmm g;
  g.J = j.at("J").get<int>();
  g.T = j.at("T").get<int>();
  g.weights.resize(g.J);
  for (int i = 0; i < g.J; ++i) g.weights(i) = j.at("weights")[i].get<double>();
  g.means = matrix_from_json(j.at("means"));
  g.sigmas = matrix_from_json(j.at("sigmas"));
  if (g.means.rows() != g.J || g.means.cols() != g.T || g.sigmas.rows() != g.J ||
      g.sigmas.cols() != g.T)
    throw FormatError("gmm file: shape fields disagree with matrices");
  return g;
}

void save_gmm_artifact(const std::string& path, const GmmArtifact& artifact) {
  nlohmann::json j = gmm_to_json(artifact.gmm);
  j["scaler"] = scaler_to_json(artifact.scaler);
  j["space"] = space_name(artifact.space);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write gmm file: " + path);
  out << j.dump(2) << "\n";
}

GmmArtifact load_gmm_artifact(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read gmm file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("gmm file parse error: ") + e.what());
  }
  GmmArtifact a;
  a.gmm = gmm_from_json(j);
  a.scaler = scaler_from_json(j.at("scaler"));
  a.space = space_from_name(j.at("space").get<std::string>());
  return a;
}

void save_dataset_artifact(const std::string& dir, const DatasetArtifact& artifact) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kArtifactFormatVersion;
  manifest["T"] = artifact.T;
  manifest["window"] = artifact.window;
  manifest["seed"] = artifact.seed;
  manifest["scaler"] = scaler_to_json(artifact.scaler);
  manifest["synthetic"] = artifact.synthetic;
  manifest["counts"] = artifact.counts;
  manifest["splits"] = {{"source", artifact.source.domains.size()},
                        {"test", artifact.test.domains.size()},
                        {"validation", artifact.validation.domains.size()}};
  {
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw FormatError("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
  }
  write_split_csv(dir + "/source.csv", artifact.source, artifact.T);
  write_split_csv(dir + "/test.csv", artifact.test, artifact.T);
  write_split_csv(dir + "/validation.csv", artifact.validation, artifact.T);
  if (!artifact.truths.empty()) {
    nlohmann::json truths = nlohmann::json::array();
    for (const auto& [id, gmm] : artifact.truths) {
      nlohmann::json t;
      t["domain_id"] = id;
      t["gmm"] = gmm_to_json(gmm);
      truths.push_back(std::move(t));
    }
    std::ofstream out(dir + "/truths.json");
    out << truths.dump(2) << "\n";
  }
}

DatasetArtifact load_dataset_artifact(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw FormatError("missing manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest parse error: ") + e.what());
  }
  if (manifest.at("format_version").get<int>() != kArtifactFormatVersion)
    throw FormatError("unsupported dataset artifact version");
  DatasetArtifact a;
  a.T = manifest.at("T").get<int>();
  a.window = manifest.at("window").get<int>();
  a.seed = manifest.at("seed").get<std::uint64_t>();
  a.scaler = scaler_from_json(manifest.at("scaler"));
  a.synthetic = manifest.value("synthetic", false);
  a.counts = manifest.value("counts", nlohmann::json::object());
  a.source = read_split_csv(dir + "/source.csv", a.T, RoleTag::source);
  a.test = read_split_csv(dir + "/test.csv", a.T, RoleTag::target);
  a.validation = read_split_csv(dir + "/validation.csv", a.T, RoleTag::validation);
  if (fs::exists(dir + "/truths.json")) {
    std::ifstream tin(dir + "/truths.json");
    nlohmann::json truths;
    tin >> truths;
    for (const auto& t : truths)
      a.truths.emplace(t.at("domain_id").get<std::string>(), gmm_from_json(t.at("gmm")));
  }
  return a;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"T", c.T},
          {"J", c.J},
          {"n_max", c.n_max},
          {"sigma_floor", c.sigma_floor},
          {"sigma_shift_space", c.sigma_shift_space == SigmaShiftSpace::additive_floored
                                    ? "additive_floored"
                                    : "log_additive"}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.T = j.at("T").get<int>();
  c.J = j.at("J").get<int>();
  c.n_max = j.at("n_max").get<int>();
  c.sigma_floor = j.at("sigma_floor").get<double>();
  const std::string space = j.at("sigma_shift_space").get<std::string>();
  if (space == "additive_floored") c.sigma_shift_space = SigmaShiftSpace::additive_floored;
  else if (space == "log_additive") c.sigma_shift_space = SigmaShiftSpace::log_additive;
  else throw FormatError("unknown sigma_shift_space: " + space);
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));

    nlohmann::json header;
    header["format_version"] = kArtifactFormatVersion;
    header["config"] = encoder_config_to_json(ckpt.model.config);
    header["theta_o"] = gmm_to_json(ckpt.theta_o);
    header["scaler"] = scaler_to_json(ckpt.scaler);
    header["step"] = ckpt.step;
    header["master_seed"] = ckpt.master_seed;
    header["adam_t"] = ckpt.adam_t;
    const std::string hs = header.dump();
    write_u32(out, static_cast<std::uint32_t>(hs.size()));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));

    write_u32(out, static_cast<std::uint32_t>(ckpt.model.params.size() +
                                              ckpt.adam_m.size() + ckpt.adam_v.size()));
    for (const auto& [name, v] : ckpt.model.params) {
      const auto [rows, cols] = ckpt.model.shapes.at(name);
      write_block(out, name, rows, cols, v);
    }
    for (const auto& [name, v] : ckpt.adam_m) {
      const auto [rows, cols] = ckpt.model.shapes.at(name);
      write_block(out, "adam.m." + name, rows, cols, v);
    }
    for (const auto& [name, v] : ckpt.adam_v) {
      const auto [rows, cols] = ckpt.model.shapes.at(name);
      write_block(out, "adam.v." + name, rows, cols, v);
    }
    if (!out) {
      fs::remove(tmp);
      throw FormatError("checkpoint write failure: " + path);
    }
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint file (bad magic): " + path);

  const std::uint32_t header_len = read_u32(in);
  std::string hs(header_len, '\0');
  in.read(hs.data(), header_len);
  if (!in) throw FormatError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header parse error: ") + e.what());
  }
  if (header.at("format_version").get<int>() != kArtifactFormatVersion)
    throw FormatError("unsupported checkpoint version");

  Checkpoint ckpt;
  ckpt.model.config = encoder_config_from_json(header.at("config"));
  ckpt.theta_o = gmm_from_json(header.at("theta_o"));
  ckpt.scaler = scaler_from_json(header.at("scaler"));
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.master_seed = header.at("master_seed").get<std::uint64_t>();
  ckpt.adam_t = header.at("adam_t").get<std::int64_t>();

  const std::uint32_t n_blocks = read_u32(in);
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    Block b = read_block(in);
    if (b.name.rfind("adam.m.", 0) == 0) {
      ckpt.adam_m[b.name.substr(7)] = std::move(b.data);
    } else if (b.name.rfind("adam.v.", 0) == 0) {
      ckpt.adam_v[b.name.substr(7)] = std::move(b.data);
    } else {
      ckpt.model.shapes[b.name] = {b.rows, b.cols};
      ckpt.model.params[b.name] = std::move(b.data);
    }
  }
  return ckpt;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot hash missing file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace fewshot
