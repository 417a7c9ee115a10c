#include "gatecraft/task.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "gatecraft/errors.hpp"

namespace gatecraft {

void SyntheticTask::validate() const {
    if (num_classes < 2) throw ConfigError("task.num_classes", "need at least 2 classes");
    if (seq_len < 2) throw ConfigError("task.seq_len", "must be at least 2");
    if (planted_channels.size() != num_classes) {
        throw ConfigError("task.planted_channels", "need one planted bin per class");
    }
    std::set<std::size_t> seen;
    for (std::size_t bin : planted_channels) {
        if (bin == 0 || 2 * bin >= seq_len) {
            throw ConfigError("task.planted_channels", "bins must lie strictly between 0 and seq_len/2");
        }
        if (!seen.insert(bin).second) throw ConfigError("task.planted_channels", "bins must be distinct");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
        throw ConfigError("task.noise_std", "must be a finite non-negative number");
    }
}

nlohmann::json to_json(const SyntheticTask& task) {
    return {{"num_classes", task.num_classes},
            {"seq_len", task.seq_len},
            {"planted_channels", task.planted_channels},
            {"noise_std", task.noise_std}};
}

SyntheticTask task_from_json(const nlohmann::json& doc, const SyntheticTask& defaults) {
    if (!doc.is_object()) throw ConfigError("task", "expected an object");
    SyntheticTask t = defaults;
    try {
        if (doc.contains("num_classes")) t.num_classes = doc.at("num_classes").get<std::size_t>();
        if (doc.contains("seq_len")) t.seq_len = doc.at("seq_len").get<std::size_t>();
        if (doc.contains("planted_channels")) {
            t.planted_channels = doc.at("planted_channels").get<std::vector<std::size_t>>();
        }
        if (doc.contains("noise_std")) t.noise_std = doc.at("noise_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("task", e.what());
    }
    t.validate();
    return t;
}

Batch generate_batch(const SyntheticTask& task, std::size_t batch_size, Rng& rng) {
    task.validate();
    std::vector<std::size_t> labels(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) labels[b] = b % task.num_classes;
    // Fisher-Yates with our own index draws keeps the order independent of the standard library.
    for (std::size_t i = batch_size; i > 1; --i) std::swap(labels[i - 1], labels[rng.index(i)]);

    const double n = static_cast<double>(task.seq_len);
    std::vector<double> x(batch_size * task.seq_len);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double freq = static_cast<double>(task.planted_channels[labels[b]]);
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        const double amplitude = 0.75 + 0.5 * rng.uniform();
        double* row = x.data() + b * task.seq_len;
        for (std::size_t t = 0; t < task.seq_len; ++t) {
            const double angle = 2.0 * std::numbers::pi * freq * static_cast<double>(t) / n + phase;
            row[t] = amplitude * std::sin(angle);
        }
        if (task.noise_std > 0.0) {
            for (std::size_t t = 0; t < task.seq_len; ++t) row[t] += rng.normal(0.0, task.noise_std);
        }
    }
    return {ad::Tensor::constant({batch_size, task.seq_len}, std::move(x)), std::move(labels)};
}

std::vector<double> planted_features(const SyntheticTask& task, std::span<const double> waveform) {
    std::vector<double> out;
    const double n = static_cast<double>(waveform.size());
    for (std::size_t bin : task.planted_channels) {
        double re = 0.0, im = 0.0;
        for (std::size_t t = 0; t < waveform.size(); ++t) {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(bin) * static_cast<double>(t) / n;
            re += waveform[t] * std::cos(angle);
            im -= waveform[t] * std::sin(angle);
        }
        out.push_back((re * re + im * im) / n);
    }
    return out;
}

}  // namespace gatecraft
