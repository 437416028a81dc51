#include "dswp/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dswp {

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    int x = std::stoi(v, &pos);
    require(pos == v.size(), "config: ", where, ": trailing characters in '", v, "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail("config: ", where, ": '", v, "' is not an integer");
  }
}

uint64_t parse_u64(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    require(pos == v.size(), "config: ", where, ": trailing characters in '", v, "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail("config: ", where, ": '", v, "' is not an unsigned integer");
  }
}

double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    require(pos == v.size(), "config: ", where, ": trailing characters in '", v, "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail("config: ", where, ": '", v, "' is not a number");
  }
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config: ", where, ": '", v, "' is not a boolean");
}

std::vector<double> parse_list(const std::string& v, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item), where));
  require(!out.empty(), "config: ", where, ": empty list");
  return out;
}

bool train_kv(TrainParams& p, const std::string& key, const std::string& value,
              const std::string& where) {
  if (key == "steps") p.steps = parse_int(value, where);
  else if (key == "batch") p.batch = parse_int(value, where);
  else if (key == "lr") p.lr = parse_double(value, where);
  else if (key == "seed") p.seed = parse_u64(value, where);
  else if (key == "log_every") p.log_every = parse_int(value, where);
  else return false;
  return true;
}

void rebuild_steps(GuidanceConfig& g, const std::vector<double>* thresholds,
                   const std::vector<double>* mults) {
  std::vector<double> th, mu;
  for (auto& [t, m] : g.steps) {
    th.push_back(t);
    mu.push_back(m);
  }
  if (thresholds) th = *thresholds;
  if (mults) mu = *mults;
  require(th.size() == mu.size(), "config: lambda_steps has ", th.size(),
          " thresholds but lambda_mults has ", mu.size());
  g.steps.clear();
  for (size_t i = 0; i < th.size(); ++i) g.steps.emplace_back(th[i], mu[i]);
}
}  // namespace

void RunConfig::validate() const {
  require(dataset.n >= 1, "config: dataset.n must be >= 1, got ", dataset.n);
  require(dataset.occluder_frac >= 0.0 && dataset.occluder_frac <= 1.0,
          "config: dataset.occluder_frac outside [0,1]");
  require(T >= 1, "config: schedule.T must be >= 1, got ", T);
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "config: schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  for (const TrainParams* p : {&codec, &denoiser, &identity, &segmenter}) {
    require(p->steps >= 1 && p->batch >= 1, "config: training steps/batch must be >= 1");
    require(p->lr > 0.0, "config: learning rate must be positive");
  }
  require(swap.k >= 0 && swap.k <= T, "config: swap.k=", swap.k, " outside [0,", T, "]");
  require(swap.eta >= 0.0 && swap.eta <= 1.0, "config: swap.eta outside [0,1]");
  if (swap.k > 0)
    require(swap.stride >= 1 && swap.k % swap.stride == 0, "config: swap.stride ", swap.stride,
            " must divide k=", swap.k);
  swap.guidance.validate();
}

RunConfig default_config() {
  RunConfig cfg;
  if (const char* env = std::getenv("DSWP_SEED")) {
    uint64_t base = parse_u64(env, "DSWP_SEED");
    cfg.dataset.seed = Philox::derive_seed(base, 0);
    cfg.codec.seed = Philox::derive_seed(base, 1);
    cfg.denoiser.seed = Philox::derive_seed(base, 2);
    cfg.identity.seed = Philox::derive_seed(base, 3);
    cfg.segmenter.seed = Philox::derive_seed(base, 4);
    cfg.swap.seed = Philox::derive_seed(base, 5);
  }
  return cfg;
}

void apply_kv(RunConfig& cfg, const std::string& section, const std::string& key,
              const std::string& value) {
  std::string where = section + "." + key;
  if (section == "dataset") {
    if (key == "n") cfg.dataset.n = parse_int(value, where);
    else if (key == "seed") cfg.dataset.seed = parse_u64(value, where);
    else if (key == "identities") cfg.dataset.identities = parse_int(value, where);
    else if (key == "occluder_frac") cfg.dataset.occluder_frac = parse_double(value, where);
    else fail("config: unknown key '", where, "'");
  } else if (section == "schedule") {
    if (key == "T") cfg.T = parse_int(value, where);
    else if (key == "beta_start") cfg.beta_start = parse_double(value, where);
    else if (key == "beta_end") cfg.beta_end = parse_double(value, where);
    else fail("config: unknown key '", where, "'");
  } else if (section == "codec" || section == "denoiser" || section == "identity" ||
             section == "segmenter") {
    TrainParams& p = section == "codec"      ? cfg.codec
                     : section == "denoiser" ? cfg.denoiser
                     : section == "identity" ? cfg.identity
                                             : cfg.segmenter;
    if (!train_kv(p, key, value, where)) fail("config: unknown key '", where, "'");
  } else if (section == "swap") {
    GuidanceConfig& g = cfg.swap.guidance;
    if (key == "k") cfg.swap.k = parse_int(value, where);
    else if (key == "eta") cfg.swap.eta = parse_double(value, where);
    else if (key == "stride") cfg.swap.stride = parse_int(value, where);
    else if (key == "seed") cfg.swap.seed = parse_u64(value, where);
    else if (key == "trace") cfg.swap.trace = parse_bool(value, where);
    else if (key == "pixel_composite") cfg.swap.pixel_composite = parse_bool(value, where);
    else if (key == "id_guidance") g.enable_id = parse_bool(value, where);
    else if (key == "seg_guidance") g.enable_seg = parse_bool(value, where);
    else if (key == "lambda_id") g.lambda_id_base = parse_double(value, where);
    else if (key == "lambda_seg") g.lambda_seg_base = parse_double(value, where);
    else if (key == "full_path") g.full_path = parse_bool(value, where);
    else if (key == "grad_clip") g.grad_clip = parse_double(value, where);
    else if (key == "lambda_steps") {
      auto th = parse_list(value, where);
      rebuild_steps(g, &th, nullptr);
    } else if (key == "lambda_mults") {
      auto mu = parse_list(value, where);
      rebuild_steps(g, nullptr, &mu);
    } else fail("config: unknown key '", where, "'");
  } else {
    fail("config: unknown section '", section, "'");
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open ", path);
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      require(s.back() == ']', "config: ", path, ":", lineno, ": malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    size_t eq = s.find('=');
    require(eq != std::string::npos, "config: ", path, ":", lineno, ": expected key = value");
    require(!section.empty(), "config: ", path, ":", lineno, ": key before any [section]");
    apply_kv(cfg, section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

std::string config_to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(10);
  os << "[dataset]\n"
     << "n = " << cfg.dataset.n << "\n"
     << "seed = " << cfg.dataset.seed << "\n"
     << "identities = " << cfg.dataset.identities << "\n"
     << "occluder_frac = " << cfg.dataset.occluder_frac << "\n\n";
  os << "[schedule]\n"
     << "T = " << cfg.T << "\n"
     << "beta_start = " << cfg.beta_start << "\n"
     << "beta_end = " << cfg.beta_end << "\n\n";
  auto train_section = [&](const char* name, const TrainParams& p) {
    os << "[" << name << "]\n"
       << "steps = " << p.steps << "\n"
       << "batch = " << p.batch << "\n"
       << "lr = " << p.lr << "\n"
       << "seed = " << p.seed << "\n"
       << "log_every = " << p.log_every << "\n\n";
  };
  train_section("codec", cfg.codec);
  train_section("denoiser", cfg.denoiser);
  train_section("identity", cfg.identity);
  train_section("segmenter", cfg.segmenter);
  const GuidanceConfig& g = cfg.swap.guidance;
  os << "[swap]\n"
     << "k = " << cfg.swap.k << "\n"
     << "eta = " << cfg.swap.eta << "\n"
     << "stride = " << cfg.swap.stride << "\n"
     << "seed = " << cfg.swap.seed << "\n"
     << "id_guidance = " << (g.enable_id ? "true" : "false") << "\n"
     << "seg_guidance = " << (g.enable_seg ? "true" : "false") << "\n"
     << "lambda_id = " << g.lambda_id_base << "\n"
     << "lambda_seg = " << g.lambda_seg_base << "\n";
  os << "lambda_steps = ";
  for (size_t i = 0; i < g.steps.size(); ++i) os << (i ? "," : "") << g.steps[i].first;
  os << "\nlambda_mults = ";
  for (size_t i = 0; i < g.steps.size(); ++i) os << (i ? "," : "") << g.steps[i].second;
  os << "\nfull_path = " << (g.full_path ? "true" : "false") << "\n"
     << "grad_clip = " << g.grad_clip << "\n"
     << "pixel_composite = " << (cfg.swap.pixel_composite ? "true" : "false") << "\n"
     << "trace = " << (cfg.swap.trace ? "true" : "false") << "\n";
  return os.str();
}

void write_config_echo(const RunConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "config: cannot write echo to ", path);
  f << config_to_ini(cfg);
}

}  // namespace dswp
