#include "edetr/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace edetr {

RunConfig default_config() {
  RunConfig c;
  c.train.epochs = 12;
  c.train.lr = 1e-4;
  c.train.lr_drop_epoch = 8;
  c.train.lr_drop_factor = 0.1;
  c.train.weight_decay = 1e-4;
  c.train.seed = 0;
  c.train.batch_size = 1;
  c.train.model = ModelConfig{};      // d32, 3 enc / 1 dec, 8 heads, 4 pts
  c.train.loss = LossWeights{};       // 2 / 5 / 2, focal (0.25, 2)
  c.train.set_loss = SetLossConfig{}; // 1-to-1 dense assignment
  c.train.proposals = {300, 100, 8};
  return c;
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Parser {
  RunConfig cfg = default_config();
  // lambdas below reach these through `this`, so they must be members
  ModelConfig& m = cfg.train.model;
  TrainConfig& t = cfg.train;
  std::map<std::string, std::function<void(const std::string&)>> keys;
  std::string current_key;

  double num(const std::string& v) {
    size_t used = 0;
    double x;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size())
      throw std::invalid_argument("config: bad numeric value '" + v +
                                  "' for key " + current_key);
    return x;
  }
  int integer(const std::string& v) {
    double x = num(v);
    if (x != static_cast<int>(x))
      throw std::invalid_argument("config: key " + current_key +
                                  " needs an integer, got '" + v + "'");
    return static_cast<int>(x);
  }
  bool boolean(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key " + current_key +
                                " needs true/false, got '" + v + "'");
  }
  std::string choice(const std::string& v,
                     const std::vector<std::string>& allowed) {
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string opts;
      for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
      throw std::invalid_argument("config: key " + current_key +
                                  " must be one of " + opts + ", got '" + v +
                                  "'");
    }
    return v;
  }

  Parser() {
    keys["d_model"] = [&](const std::string& v) { m.d_model = integer(v); };
    keys["num_classes"] = [&](const std::string& v) {
      m.num_classes = integer(v);
    };
    keys["heads"] = [&](const std::string& v) { m.heads = integer(v); };
    keys["points"] = [&](const std::string& v) { m.points = integer(v); };
    keys["encoder_layers"] = [&](const std::string& v) {
      m.encoder_layers = integer(v);
    };
    keys["decoder_layers"] = [&](const std::string& v) {
      m.decoder_layers = integer(v);
    };
    keys["anchor_scale"] = [&](const std::string& v) {
      m.anchor_scale = num(v);
    };
    keys["init"] = [&](const std::string& v) {
      m.init = choice(v, {"dense", "learnable", "grid", "center", "border"});
    };
    keys["ref"] = [&](const std::string& v) {
      m.ref_4d = choice(v, {"2d", "4d"}) == "4d";
    };
    keys["objectness"] = [&](const std::string& v) {
      m.class_agnostic = choice(v, {"specific", "agnostic"}) == "agnostic";
    };
    keys["share_head"] = [&](const std::string& v) {
      m.share_head = boolean(v);
    };
    keys["head_hidden"] = [&](const std::string& v) {
      m.head_hidden = integer(v);
    };
    keys["max_queries"] = [&](const std::string& v) {
      m.max_queries = integer(v);
    };

    keys["assign_n"] = [&](const std::string& v) {
      cfg.train.set_loss.assign_n = integer(v);
    };
    keys["proposals_start"] = [&](const std::string& v) {
      t.proposals.n_start = integer(v);
    };
    keys["proposals_end"] = [&](const std::string& v) {
      t.proposals.n_end = integer(v);
    };
    keys["proposals_decay"] = [&](const std::string& v) {
      t.proposals.decay_epochs = integer(v);
    };

    keys["lambda_cls"] = [&](const std::string& v) {
      t.loss.lambda_cls = num(v);
    };
    keys["lambda_l1"] = [&](const std::string& v) { t.loss.lambda_l1 = num(v); };
    keys["lambda_giou"] = [&](const std::string& v) {
      t.loss.lambda_giou = num(v);
    };
    keys["focal_alpha"] = [&](const std::string& v) {
      t.loss.focal_alpha = num(v);
    };
    keys["focal_gamma"] = [&](const std::string& v) {
      t.loss.focal_gamma = num(v);
    };

    keys["lr"] = [&](const std::string& v) { t.lr = num(v); };
    keys["epochs"] = [&](const std::string& v) { t.epochs = integer(v); };
    keys["lr_drop_epoch"] = [&](const std::string& v) {
      t.lr_drop_epoch = integer(v);
    };
    keys["lr_drop_factor"] = [&](const std::string& v) {
      t.lr_drop_factor = num(v);
    };
    keys["beta1"] = [&](const std::string& v) { t.beta1 = num(v); };
    keys["beta2"] = [&](const std::string& v) { t.beta2 = num(v); };
    keys["weight_decay"] = [&](const std::string& v) {
      t.weight_decay = num(v);
    };
    keys["batch_size"] = [&](const std::string& v) {
      t.batch_size = integer(v);
    };
    keys["seed"] = [&](const std::string& v) {
      t.seed = static_cast<std::uint64_t>(integer(v));
    };

    keys["train_images"] = [&](const std::string& v) {
      cfg.train_images = integer(v);
    };
    keys["eval_images"] = [&](const std::string& v) {
      cfg.eval_images = integer(v);
    };
    keys["image_size"] = [&](const std::string& v) {
      cfg.image_size = integer(v);
    };
    keys["max_objects"] = [&](const std::string& v) {
      cfg.max_objects = integer(v);
    };
    keys["data_seed"] = [&](const std::string& v) {
      cfg.data_seed = static_cast<std::uint64_t>(integer(v));
    };
  }
};

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  Parser p;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> unknown;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') continue;  // section header
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value': '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    auto it = p.keys.find(key);
    if (it == p.keys.end()) {
      unknown.push_back(key);
      continue;
    }
    p.current_key = key;
    it->second(value);
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw std::invalid_argument("config: unknown keys: " + list);
  }
  return p.cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace edetr
