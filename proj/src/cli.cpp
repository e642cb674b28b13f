#include "fspool/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fspool/checkpoint.hpp"
#include "fspool/error.hpp"
#include "fspool/gradcheck.hpp"

namespace fs = std::filesystem;

namespace fspool {

namespace {

uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: '" + value + "'");
    }
}

float parse_float(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const float v = std::stof(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError("config key '" + key + "': expected 0/1, got '" + value + "'");
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "' for digest");
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, size_t(in.gcount()), h);
        if (in.eof()) break;
    }
    return h;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "data_dir") data_dir = value;
    else if (key == "input_dim") backbone.input_dim = parse_u64(key, value);
    else if (key == "layer_widths") {
        backbone.layer_widths.clear();
        for (const std::string& w : split_csv(value)) {
            backbone.layer_widths.push_back(parse_u64(key, w));
        }
    } else if (key == "normalize") backbone.normalize = parse_bool(key, value);
    else if (key == "modulator_kind") kind = modulator_kind_from(value);
    else if (key == "selector_hidden") selector_hidden = parse_u64(key, value);
    else if (key == "seed") seed = parse_u64(key, value);
    else if (key == "split_train") split_train = parse_u64(key, value);
    else if (key == "split_val") split_val = parse_u64(key, value);
    else if (key == "split_test") split_test = parse_u64(key, value);
    else if (key == "way") way = parse_u64(key, value);
    else if (key == "shot") shot = parse_u64(key, value);
    else if (key == "query") queries = parse_u64(key, value);
    else if (key == "val_episodes") val_episodes = parse_u64(key, value);
    else if (key == "base_lr") base_cfg.lr = parse_float(key, value);
    else if (key == "base_batch") base_cfg.batch_size = parse_u64(key, value);
    else if (key == "base_steps") base_cfg.episodes_per_stage = parse_u64(key, value);
    else if (key == "base_eval_every") base_cfg.eval_every = parse_u64(key, value);
    else if (key == "base_patience") base_cfg.patience = parse_u64(key, value);
    else if (key == "mod_lr") mod_cfg.lr = parse_float(key, value);
    else if (key == "mod_episodes") mod_cfg.episodes_per_stage = parse_u64(key, value);
    else if (key == "mod_eval_every") mod_cfg.eval_every = parse_u64(key, value);
    else if (key == "mod_patience") mod_cfg.patience = parse_u64(key, value);
    else if (key == "sel_lr") sel_cfg.lr = parse_float(key, value);
    else if (key == "sel_episodes") sel_cfg.episodes_per_stage = parse_u64(key, value);
    else if (key == "sel_eval_every") sel_cfg.eval_every = parse_u64(key, value);
    else if (key == "sel_patience") sel_cfg.patience = parse_u64(key, value);
    else if (key == "ipool_lr") ipool_cfg.lr = parse_float(key, value);
    else if (key == "ipool_episodes") ipool_cfg.episodes_per_stage = parse_u64(key, value);
    else if (key == "ipool_eval_every") ipool_cfg.eval_every = parse_u64(key, value);
    else if (key == "ipool_patience") ipool_cfg.patience = parse_u64(key, value);
    else if (key == "eval_episodes") eval_episodes = parse_u64(key, value);
    else if (key == "adapt_iterations") adapt_iterations = parse_u64(key, value);
    else if (key == "adapt_lr") adapt_lr = parse_float(key, value);
    else if (key == "train_domains") train_domains = split_csv(value);
    else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::finalize() {
    backbone.validate();
    if ((split_train | split_val | split_test) != 0 &&
        (split_train == 0 || split_val == 0 || split_test == 0)) {
        throw ConfigError("split_train/split_val/split_test must be set together");
    }
    for (TrainConfig* cfg : {&base_cfg, &mod_cfg, &sel_cfg, &ipool_cfg}) {
        cfg->seed = seed;
        cfg->way = way;
        cfg->shot = shot;
        cfg->queries = queries;
        cfg->val_episodes = val_episodes;
    }
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    RunConfig cfg;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        const size_t from = line.find_first_not_of(" \t\r");
        if (from == std::string::npos) continue;
        const size_t to = line.find_last_not_of(" \t\r");
        line = line.substr(from, to - from + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
        }
        try {
            cfg.apply(line.substr(0, eq), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

// --- domain spec files ----------------------------------------------------------

std::vector<SyntheticDomainSpec> parse_domain_specs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open spec file '" + path + "'");
    std::vector<SyntheticDomainSpec> specs;
    std::string line;
    size_t line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": " + msg);
    };
    auto current = [&]() -> SyntheticDomainSpec& {
        if (specs.empty()) fail("key outside a [domain] section");
        return specs.back();
    };
    while (std::getline(in, line)) {
        line_no++;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const size_t from = line.find_first_not_of(" \t\r");
        if (from == std::string::npos) continue;
        const size_t to = line.find_last_not_of(" \t\r");
        line = line.substr(from, to - from + 1);
        if (line == "[domain]") {
            specs.emplace_back();
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key=value or [domain]");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        SyntheticDomainSpec& spec = current();
        try {
            if (key == "name") spec.name = value;
            else if (key == "feature_dim") spec.feature_dim = parse_u64(key, value);
            else if (key == "classes") spec.class_count = parse_u64(key, value);
            else if (key == "examples_per_class") spec.examples_per_class = parse_u64(key, value);
            else if (key == "spread") spec.cluster_spread = parse_float(key, value);
            else if (key == "seed") spec.seed = parse_u64(key, value);
            else if (key == "transform") {
                if (value == "rotation") spec.transform.kind = TransformKind::Rotation;
                else if (value == "axis_mask") spec.transform.kind = TransformKind::AxisMask;
                else if (value == "frequency") spec.transform.kind = TransformKind::Frequency;
                else fail("unknown transform '" + value + "'");
            } else if (key == "angles") {
                spec.transform.angles.clear();
                for (const std::string& a : split_csv(value)) {
                    spec.transform.angles.push_back(parse_float(key, a));
                }
            } else if (key == "keep") {
                spec.transform.kept_dims.clear();
                for (const std::string& d : split_csv(value)) {
                    spec.transform.kept_dims.push_back(parse_u64(key, d));
                }
            } else if (key == "amp") spec.transform.freq_amp = parse_float(key, value);
            else if (key == "omega") spec.transform.freq_omega = parse_float(key, value);
            else if (key == "phase") spec.transform.freq_phase = parse_float(key, value);
            else if (key == "dims") {
                spec.transform.freq_dims.clear();
                for (const std::string& d : split_csv(value)) {
                    spec.transform.freq_dims.push_back(parse_u64(key, d));
                }
            }
            else fail("unknown key '" + key + "'");
        } catch (const ConfigError& e) {
            if (std::string(e.what()).find(path) == std::string::npos) {
                fail(e.what());
            }
            throw;
        }
    }
    if (specs.empty()) throw ConfigError(path + ": no [domain] sections");
    for (const SyntheticDomainSpec& spec : specs) spec.validate();
    return specs;
}

// --- data loading ----------------------------------------------------------------

namespace {

struct ManifestEntry {
    std::string name;
    std::string file;
    std::string digest;
};

std::vector<ManifestEntry> read_manifest(const std::string& data_dir) {
    const std::string path = (fs::path(data_dir) / "manifest.txt").string();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest '" + path + "'");
    std::vector<ManifestEntry> entries;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        ManifestEntry e;
        if (!(row >> e.name >> e.file >> e.digest)) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected 'name file digest'");
        }
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw FormatError(path + ": no datasets listed");
    return entries;
}

ClassSplit domain_split(const DomainDataset& d, uint64_t seed, size_t st, size_t sv, size_t ste) {
    const uint64_t split_seed = mix_seed(seed, fnv1a64(d.name));
    if (st == 0 && sv == 0 && ste == 0) return split_classes(d.class_count(), split_seed);
    return split_classes_explicit(d.class_count(), split_seed, st, sv, ste);
}

}  // namespace

LoadedData load_data(const std::string& data_dir, const std::vector<std::string>& restrict_to,
                     uint64_t split_seed, size_t split_train, size_t split_val,
                     size_t split_test) {
    std::vector<ManifestEntry> entries = read_manifest(data_dir);
    if (!restrict_to.empty()) {
        std::vector<ManifestEntry> filtered;
        for (const std::string& want : restrict_to) {
            auto it = std::find_if(entries.begin(), entries.end(),
                                   [&](const ManifestEntry& e) { return e.name == want; });
            if (it == entries.end()) {
                throw ConfigError("domain '" + want + "' not listed in " + data_dir +
                                  "/manifest.txt");
            }
            filtered.push_back(*it);
        }
        entries = std::move(filtered);
    }
    LoadedData out;
    uint64_t digest = 0xcbf29ce484222325ull;
    for (const ManifestEntry& e : entries) {
        const std::string path = (fs::path(data_dir) / e.file).string();
        const uint64_t actual = file_digest(path);
        if (hex64(actual) != e.digest) {
            throw FormatError("dataset '" + e.name + "': digest mismatch, manifest says " +
                              e.digest + " but file hashes to " + hex64(actual));
        }
        DomainDataset d = read_dataset(path);
        if (d.name != e.name) {
            throw FormatError("dataset file '" + e.file + "' holds domain '" + d.name +
                              "', manifest says '" + e.name + "'");
        }
        const std::string row = e.name + ":" + e.digest + ";";
        digest = fnv1a64(row.data(), row.size(), digest);
        out.splits.push_back(domain_split(d, split_seed, split_train, split_val, split_test));
        out.domains.push_back(std::move(d));
    }
    out.digest = hex64(digest);
    return out;
}

// --- gen-data ---------------------------------------------------------------------

void cmd_gen_data(const std::string& spec_path, const std::string& out_dir, uint64_t seed,
                  std::ostream* log) {
    std::vector<SyntheticDomainSpec> specs = parse_domain_specs(spec_path);
    fs::create_directories(out_dir);
    std::string manifest;
    for (SyntheticDomainSpec spec : specs) {
        spec.seed += seed;
        const DomainDataset ds = gen_synthetic_domain(spec);
        const std::string file = spec.name + ".fsds";
        const std::string path = (fs::path(out_dir) / file).string();
        write_dataset(ds, path);
        manifest += spec.name + " " + file + " " + hex64(file_digest(path)) + "\n";
        if (log) {
            *log << "wrote " << path << " (" << ds.class_count() << " classes)\n";
        }
    }
    const std::string manifest_path = (fs::path(out_dir) / "manifest.txt").string();
    std::ofstream out(manifest_path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + manifest_path + "' for writing");
    out << manifest;
    if (log) *log << "wrote " << manifest_path << "\n";
}

// --- training stages -----------------------------------------------------------------

namespace {

std::string split_override_string(const RunConfig& cfg) {
    if (cfg.split_train == 0 && cfg.split_val == 0 && cfg.split_test == 0) return "";
    return std::to_string(cfg.split_train) + "," + std::to_string(cfg.split_val) + "," +
           std::to_string(cfg.split_test);
}

void read_split_meta(const Checkpoint& ck, size_t& st, size_t& sv, size_t& ste) {
    st = sv = ste = 0;
    auto it = ck.meta.find("split_override");
    if (it == ck.meta.end() || it->second.empty()) return;
    const std::vector<std::string> parts = split_csv(it->second);
    if (parts.size() != 3) throw FormatError("checkpoint split_override must have 3 fields");
    st = std::stoull(parts[0]);
    sv = std::stoull(parts[1]);
    ste = std::stoull(parts[2]);
}

LoadedData load_data_for_checkpoint(const std::string& data_dir, const Checkpoint& ck,
                                    const std::vector<std::string>& domains) {
    size_t st, sv, ste;
    read_split_meta(ck, st, sv, ste);
    const uint64_t seed = std::stoull(ck.require_meta("seed"));
    return load_data(data_dir, domains, seed, st, sv, ste);
}

}  // namespace

void cmd_train(const std::string& stage, const RunConfig& cfg_in, const std::string& in_ckpt,
               const std::string& out_ckpt, std::ostream* log) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set");

    if (stage == "base") {
        if (!in_ckpt.empty()) {
            throw ConfigError("train-base starts a pipeline and takes no input checkpoint");
        }
        LoadedData data = load_data(cfg.data_dir, cfg.train_domains, cfg.seed, cfg.split_train,
                                    cfg.split_val, cfg.split_test);
        AggregateDataset agg = aggregate_classes(data.domains, data.splits);
        if (log) {
            *log << "aggregated " << agg.examples.size() << " examples over " << agg.class_count
                 << " classes from " << data.domains.size() << " domains\n";
        }
        BaseParams theta = train_base(agg, cfg.backbone, cfg.base_cfg, log);

        ModelPool pool;
        pool.spec = cfg.backbone;
        pool.theta = std::move(theta);
        pool.kind = cfg.kind;
        for (const DomainDataset& d : data.domains) pool.domain_names.push_back(d.name);

        Checkpoint ck;
        pack_pool(ck, pool);
        ck.meta["stage"] = "base";
        ck.meta["seed"] = std::to_string(cfg.seed);
        ck.meta["split_override"] = split_override_string(cfg);
        ck.meta["data_digest"] = data.digest;
        write_checkpoint(ck, out_ckpt);
        if (log) *log << "wrote " << out_ckpt << "\n";
        return;
    }

    if (stage == "modulators") {
        Checkpoint in = read_checkpoint(in_ckpt);
        if (in.stage() != "base") {
            throw PipelineError("train-modulators requires a base-stage checkpoint, got stage '" +
                                in.stage() + "'");
        }
        ModelPool pool = unpack_pool(in);
        LoadedData data = load_data_for_checkpoint(cfg.data_dir, in, pool.domain_names);
        if (data.digest != in.require_meta("data_digest")) {
            throw ConfigError("data directory does not match the checkpoint's data digest");
        }
        for (size_t i = 0; i < pool.domain_names.size(); ++i) {
            pool.modulators.push_back(init_modulator(pool.spec, pool.kind));
        }
        for (size_t i = 0; i < data.domains.size(); ++i) {
            if (log) *log << "training modulator for domain " << data.domains[i].name << "\n";
            train_modulator(data.domains[i], data.splits[i], pool, i + 1, cfg.mod_cfg, log);
        }
        Checkpoint out;
        out.meta = in.meta;
        pack_pool(out, pool);
        out.meta["stage"] = "modulators";
        write_checkpoint(out, out_ckpt);
        if (log) *log << "wrote " << out_ckpt << "\n";
        return;
    }

    if (stage == "selector") {
        Checkpoint in = read_checkpoint(in_ckpt);
        if (in.stage() != "modulators") {
            throw PipelineError("train-selector requires a modulators-stage checkpoint, got stage '" +
                                in.stage() + "'");
        }
        ModelPool pool = unpack_pool(in);
        LoadedData data = load_data_for_checkpoint(cfg.data_dir, in, pool.domain_names);
        if (data.digest != in.require_meta("data_digest")) {
            throw ConfigError("data directory does not match the checkpoint's data digest");
        }
        SelectionNetwork phi =
            train_selector(data.domains, data.splits, pool, cfg.sel_cfg, cfg.selector_hidden, log);
        Checkpoint out;
        out.meta = in.meta;
        pack_pool(out, pool);
        pack_selector(out, phi);
        out.meta["stage"] = "selector";
        write_checkpoint(out, out_ckpt);
        if (log) *log << "wrote " << out_ckpt << "\n";
        return;
    }

    throw ConfigError("unknown training stage '" + stage +
                      "' (expected base, modulators or selector)");
}

// --- eval ------------------------------------------------------------------------------

namespace {

void print_report_summary(const EvalReport& report, std::ostream& out) {
    // per-domain means with the same normal-approximation interval
    for (const std::string& domain : report.target_domains) {
        double mean = 0.0, var = 0.0;
        size_t n = 0;
        for (const EpisodeResult& r : report.episodes) {
            if (r.domain == domain) {
                mean += double(r.accuracy);
                n++;
            }
        }
        if (n == 0) continue;
        mean /= double(n);
        for (const EpisodeResult& r : report.episodes) {
            if (r.domain == domain) var += (double(r.accuracy) - mean) * (double(r.accuracy) - mean);
        }
        const double sd = n > 1 ? std::sqrt(var / double(n - 1)) : 0.0;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-12s mean=%.4f ci95=%.4f episodes=%zu", domain.c_str(),
                      mean, 1.96 * sd / std::sqrt(double(n)), n);
        out << buf << "\n";
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s mean=%.4f ci95=%.4f episodes=%zu", "overall",
                  double(report.mean), double(report.ci95), report.episodes.size());
    out << buf << "\n";
}

}  // namespace

EvalReport cmd_eval(const RunConfig& cfg_in, const std::string& ckpt_path, const EvalFlags& flags,
                    const std::string& report_path, std::ostream* log) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set");

    Checkpoint ck = read_checkpoint(ckpt_path);
    const std::string stage = ck.stage();
    ModelPool pool = unpack_pool(ck);
    std::optional<SelectionNetwork> phi = unpack_selector(ck);
    const std::vector<std::string> sources = pool.domain_names;

    const Method method = method_from(flags.method);
    if (method == Method::DoS && !phi.has_value()) {
        throw ConfigError("method dos requires a selector-stage checkpoint; run train-selector");
    }
    if (method == Method::DoA && stage == "base") {
        throw ConfigError("method doa requires trained modulators; run train-modulators");
    }

    EvalSettings settings;
    settings.method = method;
    settings.split = split_part_from(flags.split);
    settings.episodes = flags.episodes;
    settings.way = flags.way;
    settings.shot = flags.shot;
    settings.queries = flags.queries;
    settings.seed = flags.seed;
    settings.further_adapt = flags.further_adapt;
    settings.unseen = !flags.holdout.empty();
    settings.adapt_iterations = cfg.adapt_iterations;
    settings.adapt_lr = cfg.adapt_lr;

    std::vector<std::string> target_names =
        settings.unseen ? std::vector<std::string>{flags.holdout} : sources;
    LoadedData data = load_data_for_checkpoint(cfg.data_dir, ck, target_names);

    // the independent pool for simple-avg is trained on the checkpoint's
    // source domains, deterministically from the config seed
    IndependentPool ipool;
    if (method == Method::SimpleAvg) {
        LoadedData source_data = load_data_for_checkpoint(cfg.data_dir, ck, sources);
        ipool.spec = pool.spec;
        ipool.domain_names = sources;
        for (size_t i = 0; i < source_data.domains.size(); ++i) {
            if (log) *log << "training independent member for " << sources[i] << "\n";
            ipool.members.push_back(train_protonet_member(
                source_data.domains[i], source_data.splits[i], pool.spec, cfg.ipool_cfg, i, log));
        }
    }

    EvalReport report =
        evaluate(settings, data.domains, data.splits, &pool, phi ? &*phi : nullptr,
                 method == Method::SimpleAvg ? &ipool : nullptr, sources);
    report.settings["checkpoint_digest"] = hex64(file_digest(ckpt_path));
    report.settings["data_digest"] = ck.require_meta("data_digest");

    if (!report_path.empty()) {
        write_report(report, report_path);
        if (log) *log << "wrote " << report_path << "\n";
    }
    if (log) print_report_summary(report, *log);
    return report;
}

void cmd_contributions(const RunConfig& cfg_in, const std::string& ckpt_path,
                       const EvalFlags& flags, const std::string& report_path,
                       std::ostream* log) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set");

    Checkpoint ck = read_checkpoint(ckpt_path);
    if (ck.stage() == "base") {
        throw ConfigError("contributions requires trained modulators; run train-modulators");
    }
    ModelPool pool = unpack_pool(ck);
    LoadedData data = load_data_for_checkpoint(cfg.data_dir, ck, pool.domain_names);

    Rng rng(mix_seed(flags.seed, 0xC027));
    std::vector<EpisodeData> tasks;
    std::vector<std::string> provenance;
    for (size_t e = 0; e < flags.episodes; ++e) {
        const size_t di = size_t(rng.below(data.domains.size()));
        Episode ep = sample_episode(data.domains[di], data.splits[di],
                                    split_part_from(flags.split), flags.way, flags.shot,
                                    flags.queries, rng);
        provenance.push_back(ep.domain_name);
        tasks.push_back(std::move(ep.task));
    }
    const std::vector<std::vector<size_t>> counts = contribution_report(pool, tasks);

    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + report_path + "' for writing");
    out << "episodes=" << flags.episodes << "\n";
    out << "way=" << flags.way << "\n";
    out << "shot=" << flags.shot << "\n";
    out << "query=" << flags.queries << "\n";
    out << "seed=" << flags.seed << "\n";
    out << "split=" << flags.split << "\n";
    out << "checkpoint_digest=" << hex64(file_digest(ckpt_path)) << "\n";
    out << "episode_index,domain,model_index,correct_count\n";
    for (size_t e = 0; e < counts.size(); ++e) {
        for (size_t m = 0; m < counts[e].size(); ++m) {
            out << e << "," << provenance[e] << "," << m << "," << counts[e][m] << "\n";
        }
    }
    if (log) *log << "wrote " << report_path << "\n";
}

int cmd_gradcheck(std::ostream& out) {
    const std::vector<GradCheckCase> cases = run_gradcheck_suite();
    bool all_pass = true;
    for (const GradCheckCase& c : cases) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "op %-18s max_rel_err=%.3e threshold=%.0e %s",
                      c.name.c_str(), c.error, c.threshold, c.pass() ? "PASS" : "FAIL");
        out << buf << "\n";
        all_pass = all_pass && c.pass();
    }
    out << (all_pass ? "gradcheck: PASS" : "gradcheck: FAIL") << "\n";
    return all_pass ? 0 : 1;
}

// --- argv entry point ---------------------------------------------------------------

namespace {

RunConfig config_from_flags(const std::string& config_path, const std::string& data_dir,
                            const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    for (const std::string& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.apply(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"pooled few-shot classification across domains"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, config_path, data_dir, in_ckpt, out_ckpt, report_path;
    std::string ckpt_path;
    uint64_t seed = 0;
    std::vector<std::string> overrides;
    EvalFlags flags;

    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic multi-domain datasets");
    gen->add_option("--spec", spec_path, "domain spec file")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "seed offset added to each domain's seed");

    auto add_common = [&](CLI::App* cmd, bool config_required) {
        CLI::Option* opt = cmd->add_option("--config", config_path, "key=value config file")
                               ->check(CLI::ExistingFile);
        if (config_required) opt->required();
        cmd->add_option("--data", data_dir, "data directory (overrides config)")
            ->check(CLI::ExistingDirectory);
        cmd->add_option("--set", overrides, "override a config key (key=value)");
    };

    CLI::App* train_base_cmd = app.add_subcommand("train-base", "stage 1: base network");
    add_common(train_base_cmd, true);
    train_base_cmd->add_option("--out", out_ckpt, "output checkpoint")->required();

    CLI::App* train_mod_cmd = app.add_subcommand("train-modulators", "stage 2: per-domain modulators");
    add_common(train_mod_cmd, true);
    train_mod_cmd->add_option("--in", in_ckpt, "base checkpoint")->required()->check(CLI::ExistingFile);
    train_mod_cmd->add_option("--out", out_ckpt, "output checkpoint")->required();

    CLI::App* train_sel_cmd = app.add_subcommand("train-selector", "stage 3: selection network");
    add_common(train_sel_cmd, true);
    train_sel_cmd->add_option("--in", in_ckpt, "modulators checkpoint")->required()->check(CLI::ExistingFile);
    train_sel_cmd->add_option("--out", out_ckpt, "output checkpoint")->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate an inference method");
    add_common(eval_cmd, false);
    eval_cmd->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--method", flags.method, "proto|dos|doa|simple-avg|fine-tune")->required();
    eval_cmd->add_option("--episodes", flags.episodes, "test episodes")->capture_default_str();
    eval_cmd->add_option("--way", flags.way, "classes per episode")->capture_default_str();
    eval_cmd->add_option("--shot", flags.shot, "support examples per class")->capture_default_str();
    eval_cmd->add_option("--query", flags.queries, "query examples per class")->capture_default_str();
    eval_cmd->add_option("--seed", flags.seed, "episode sampling seed")->capture_default_str();
    eval_cmd->add_option("--split", flags.split, "train|val|test")->capture_default_str();
    eval_cmd->add_flag("--further-adapt", flags.further_adapt,
                       "train a per-episode linear classifier on the support set");
    eval_cmd->add_option("--holdout", flags.holdout,
                         "unseen protocol: evaluate this held-out domain only");
    eval_cmd->add_option("--report", report_path, "report file to write");

    CLI::App* contrib_cmd = app.add_subcommand("contributions", "per-model correct counts per episode");
    add_common(contrib_cmd, false);
    contrib_cmd->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required()->check(CLI::ExistingFile);
    contrib_cmd->add_option("--episodes", flags.episodes, "episodes to sample")->capture_default_str();
    contrib_cmd->add_option("--way", flags.way)->capture_default_str();
    contrib_cmd->add_option("--shot", flags.shot)->capture_default_str();
    contrib_cmd->add_option("--query", flags.queries)->capture_default_str();
    contrib_cmd->add_option("--seed", flags.seed)->capture_default_str();
    contrib_cmd->add_option("--split", flags.split)->capture_default_str();
    contrib_cmd->add_option("--report", report_path, "CSV file to write")->required();

    app.add_subcommand("gradcheck", "verify gradients of all registered operations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            app.exit(e);
            return 0;
        }
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            cmd_gen_data(spec_path, out_dir, seed, &std::cout);
        } else if (train_base_cmd->parsed()) {
            cmd_train("base", config_from_flags(config_path, data_dir, overrides), "", out_ckpt,
                      &std::cout);
        } else if (train_mod_cmd->parsed()) {
            cmd_train("modulators", config_from_flags(config_path, data_dir, overrides), in_ckpt,
                      out_ckpt, &std::cout);
        } else if (train_sel_cmd->parsed()) {
            cmd_train("selector", config_from_flags(config_path, data_dir, overrides), in_ckpt,
                      out_ckpt, &std::cout);
        } else if (eval_cmd->parsed()) {
            cmd_eval(config_from_flags(config_path, data_dir, overrides), ckpt_path, flags,
                     report_path, &std::cout);
        } else if (contrib_cmd->parsed()) {
            cmd_contributions(config_from_flags(config_path, data_dir, overrides), ckpt_path,
                              flags, report_path, &std::cout);
        } else {  // gradcheck
            return cmd_gradcheck(std::cout);
        }
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const PipelineError& e) {
        std::cerr << "pipeline error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace fspool
