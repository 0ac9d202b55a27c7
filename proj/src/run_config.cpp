#include "kvfuse/run_config.hpp"

#include <fstream>
#include <sstream>

#include "kvfuse/errors.hpp"
#include "kvfuse/rng.hpp"

namespace kvfuse {

namespace {

const nlohmann::json& section(const nlohmann::json& file, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!file.contains(name)) return empty;
  const auto& s = file.at(name);
  if (!s.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
  return s;
}

SynthConfig synth_from_json(const nlohmann::json& j) {
  SynthConfig s;
  try {
    s.train_count = j.value("train_count", s.train_count);
    s.dev_count = j.value("dev_count", s.dev_count);
    s.test_count = j.value("test_count", s.test_count);
    s.n_passages = j.value("n_passages", s.n_passages);
    if (j.contains("style")) s.style = distractor_style_from_string(j.at("style").get<std::string>());
    s.unanswerable_rate = j.value("unanswerable_rate", s.unanswerable_rate);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return s;
}

}  // namespace

RunConfig resolve_run_config(const nlohmann::json& file, const Overrides& o) {
  if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
  RunConfig c;
  try {
    c.seed = file.value("seed", c.seed);
    c.out = file.value("out", c.out);
    c.data = file.value("data", c.data);
    c.checkpoint_every = file.value("checkpoint_every", c.checkpoint_every);
    c.log_every = file.value("log_every", c.log_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (file.contains("model")) c.model = model_config_from_json(section(file, "model"));
  c.train = train_config_from_json(section(file, "train"));
  c.eval = eval_config_from_json(section(file, "eval"));
  c.synth = synth_from_json(section(file, "synth"));

  if (o.seed) c.seed = *o.seed;
  if (!section(file, "train").contains("seed")) c.train.seed = derive_seed(c.seed, "train");
  if (!section(file, "eval").contains("shuffle_seed")) {
    c.eval.shuffle_seed = derive_seed(c.seed, "eval.shuffle");
  }
  if (!section(file, "train").contains("n_passages")) c.train.n_passages = c.synth.n_passages;

  if (o.out) c.out = *o.out;
  if (o.data) c.data = *o.data;
  if (o.dataset) c.eval.dataset = *o.dataset;
  if (o.steps) c.train.total_steps = *o.steps;
  if (o.limit) c.eval.limit = *o.limit;
  if (o.n_passages) {
    c.synth.n_passages = *o.n_passages;
    c.train.n_passages = *o.n_passages;
  }
  if (o.mode) c.eval.mode = eval_mode_from_string(*o.mode);
  if (o.positions) {
    c.eval.positions = *o.positions;
  } else if (!section(file, "eval").contains("positions")) {
    // Every other slot, starting with the first.
    c.eval.positions.clear();
    for (int p = 0; p < c.synth.n_passages; p += 2) c.eval.positions.push_back(p);
  }
  if (o.shuffle_seed) c.eval.shuffle_seed = *o.shuffle_seed;
  if (o.max_new) c.eval.max_new = *o.max_new;
  c.eval.n = c.train.n;

  c.model.validate();
  c.train.validate();
  c.eval.validate();
  if (c.synth.train_count < 1 || c.synth.dev_count < 1 || c.synth.test_count < 1) {
    throw ConfigError("synth split sizes must be >= 1");
  }
  if (c.synth.n_passages < 2) throw ConfigError("n_passages must be >= 2");
  if (c.checkpoint_every < 0 || c.log_every < 1) {
    throw ConfigError("checkpoint_every must be >= 0 and log_every >= 1");
  }
  for (int p : c.eval.positions) {
    if (p >= c.synth.n_passages) {
      throw ConfigError("position " + std::to_string(p) + " is outside [0, " +
                        std::to_string(c.synth.n_passages) + ")");
    }
  }
  return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const Overrides& o) {
  nlohmann::json file = nlohmann::json::object();
  if (path) {
    try {
      file = nlohmann::json::parse(read_file(*path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path->string() + ": " + e.what());
    }
  }
  return resolve_run_config(file, o);
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"out", c.out},
          {"data", c.data_dir().string()},
          {"checkpoint_every", c.checkpoint_every},
          {"log_every", c.log_every},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)},
          {"synth",
           {{"train_count", c.synth.train_count},
            {"dev_count", c.synth.dev_count},
            {"test_count", c.synth.test_count},
            {"n_passages", c.synth.n_passages},
            {"style", std::string(to_string(c.synth.style))},
            {"unanswerable_rate", c.synth.unanswerable_rate}}}};
}

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    try {
      size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("not an integer list: '" + std::string(text) + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace kvfuse
