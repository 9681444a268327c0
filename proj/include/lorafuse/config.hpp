#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "lorafuse/evaluate.hpp"
#include "lorafuse/fusion.hpp"

namespace lorafuse {

/// Run configuration: a sectioned key = value text file. Unknown keys are
/// rejected so typos fail loudly; the resolved form is written next to every
/// run's outputs.
struct RunConfig {
    // [model]
    std::size_t input_dim = 256;
    std::size_t hidden_dim = 256;
    std::size_t hidden_layers = 3;
    std::size_t time_embed_dim = 16;
    std::size_t rank = 4;
    // [schedule]
    int t_train = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    // [sampler]
    int steps = 50;
    std::uint64_t seed = 0;
    // [fusion]
    std::string policy = "kl";  // base|content|style|merge|kl|topk
    std::string criterion = "kl";  // kl|js|cosine|dot
    double temperature = 1.0;
    std::size_t topk = 0;
    double merge_content = 1.0;
    double merge_style = 1.0;
    // [guidance]
    bool guidance_enabled = true;
    double m = 10.0;
    int stride = 1;
    // [train]
    std::size_t base_steps = 2000;
    std::size_t adapter_steps = 1000;
    double lr = 1e-3;
    std::size_t batch = 16;
    std::uint64_t train_seed = 7;
    // [data]
    double data_noise = 0.05;
    std::uint64_t data_seed = 5;
    std::size_t n_per_cell = 16;
    // [paths]
    std::string out_dir = ".";

    static RunConfig parse(std::istream& is) {
        RunConfig c;
        std::string line, section;
        std::size_t lineno = 0;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw FormatError("config: bad section at line " + std::to_string(lineno));
                section = line.substr(1, line.size() - 2);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw FormatError("config: expected key = value at line " + std::to_string(lineno));
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            try {
                c.set(section, key, val);
            } catch (const FormatError&) {
                throw;
            } catch (const std::exception&) {
                throw FormatError("config: bad value for " + section + "." + key +
                                  " at line " + std::to_string(lineno));
            }
        }
        c.validate();
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw FormatError("config: cannot open " + path);
        return parse(f);
    }

    void set(const std::string& section, const std::string& key, const std::string& val) {
        const std::string k = section + "." + key;
        if (k == "model.input_dim") input_dim = std::stoul(val);
        else if (k == "model.hidden_dim") hidden_dim = std::stoul(val);
        else if (k == "model.hidden_layers") hidden_layers = std::stoul(val);
        else if (k == "model.time_embed_dim") time_embed_dim = std::stoul(val);
        else if (k == "model.rank") rank = std::stoul(val);
        else if (k == "schedule.t_train") t_train = std::stoi(val);
        else if (k == "schedule.beta_start") beta_start = std::stod(val);
        else if (k == "schedule.beta_end") beta_end = std::stod(val);
        else if (k == "sampler.steps") steps = std::stoi(val);
        else if (k == "sampler.seed") seed = std::stoull(val);
        else if (k == "fusion.policy") policy = val;
        else if (k == "fusion.criterion") criterion = val;
        else if (k == "fusion.temperature") temperature = std::stod(val);
        else if (k == "fusion.topk") topk = std::stoul(val);
        else if (k == "fusion.merge_content") merge_content = std::stod(val);
        else if (k == "fusion.merge_style") merge_style = std::stod(val);
        else if (k == "guidance.enabled") guidance_enabled = parse_bool(val);
        else if (k == "guidance.m") m = std::stod(val);
        else if (k == "guidance.stride") stride = std::stoi(val);
        else if (k == "train.base_steps") base_steps = std::stoul(val);
        else if (k == "train.adapter_steps") adapter_steps = std::stoul(val);
        else if (k == "train.lr") lr = std::stod(val);
        else if (k == "train.batch") batch = std::stoul(val);
        else if (k == "train.seed") train_seed = std::stoull(val);
        else if (k == "data.noise") data_noise = std::stod(val);
        else if (k == "data.seed") data_seed = std::stoull(val);
        else if (k == "data.n_per_cell") n_per_cell = std::stoul(val);
        else if (k == "paths.out_dir") out_dir = val;
        else throw FormatError("config: unknown key '" + k + "'");
    }

    void validate() const {
        if (policy != "base" && policy != "content" && policy != "style" &&
            policy != "merge" && policy != "kl" && policy != "topk")
            throw FormatError("config: unknown fusion.policy '" + policy + "'");
        if (criterion != "kl" && criterion != "js" && criterion != "cosine" &&
            criterion != "dot")
            throw FormatError("config: unknown fusion.criterion '" + criterion + "'");
        if (steps < 1 || steps > t_train) throw FormatError("config: bad sampler.steps");
        if (m < 0) throw FormatError("config: guidance.m must be >= 0");
    }

    Criterion criterion_enum() const {
        if (criterion == "kl") return Criterion::KL;
        if (criterion == "js") return Criterion::JS;
        if (criterion == "cosine") return Criterion::Cosine;
        return Criterion::DotProduct;
    }

    FusionPolicy fusion_policy() const {
        if (policy == "base") return FusionPolicy::base_only();
        if (policy == "content") return FusionPolicy::content_only();
        if (policy == "style") return FusionPolicy::style_only();
        if (policy == "merge") return FusionPolicy::direct_merge(merge_content, merge_style);
        if (policy == "topk") return FusionPolicy::magnitude_topk(topk);
        FusionPolicy p = FusionPolicy::kl_select(criterion_enum(), temperature);
        return p;
    }

    /// Canonical text form; also the hashing basis for run metadata.
    std::string resolved() const {
        std::ostringstream os;
        os << "[model]\n"
           << "input_dim = " << input_dim << "\nhidden_dim = " << hidden_dim
           << "\nhidden_layers = " << hidden_layers
           << "\ntime_embed_dim = " << time_embed_dim << "\nrank = " << rank << "\n"
           << "[schedule]\n"
           << "t_train = " << t_train << "\nbeta_start = " << fmt_double(beta_start)
           << "\nbeta_end = " << fmt_double(beta_end) << "\n"
           << "[sampler]\n"
           << "steps = " << steps << "\nseed = " << seed << "\n"
           << "[fusion]\n"
           << "policy = " << policy << "\ncriterion = " << criterion
           << "\ntemperature = " << fmt_double(temperature) << "\ntopk = " << topk
           << "\nmerge_content = " << fmt_double(merge_content)
           << "\nmerge_style = " << fmt_double(merge_style) << "\n"
           << "[guidance]\n"
           << "enabled = " << (guidance_enabled ? "true" : "false")
           << "\nm = " << fmt_double(m) << "\nstride = " << stride << "\n"
           << "[train]\n"
           << "base_steps = " << base_steps << "\nadapter_steps = " << adapter_steps
           << "\nlr = " << fmt_double(lr) << "\nbatch = " << batch
           << "\nseed = " << train_seed << "\n"
           << "[data]\n"
           << "noise = " << fmt_double(data_noise) << "\nseed = " << data_seed
           << "\nn_per_cell = " << n_per_cell << "\n"
           << "[paths]\n"
           << "out_dir = " << out_dir << "\n";
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a(resolved()); }

private:
    static bool parse_bool(const std::string& v) {
        if (v == "true" || v == "1" || v == "on") return true;
        if (v == "false" || v == "0" || v == "off") return false;
        throw FormatError("config: bad boolean '" + v + "'");
    }
};

}  // namespace lorafuse
