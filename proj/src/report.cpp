#include "lutq/report.hpp"

#include <fmt/format.h>

namespace lutq {

nlohmann::json to_json(const OpCounts& ops) {
    return {{"multiplications", ops.multiplications},
            {"shifts", ops.shifts},
            {"additions", ops.additions},
            {"lookups", ops.lookups}};
}

nlohmann::json to_json(const OpCountReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers) {
        nlohmann::json j = to_json(l.ops);
        j["layer"] = l.layer;
        j["kind"] = to_string(l.kind);
        layers.push_back(std::move(j));
    }
    return {{"mode", to_string(r.mode)}, {"samples", r.samples}, {"layers", layers}, {"totals", to_json(r.totals())}};
}

nlohmann::json to_json(const FootprintReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers)
        layers.push_back({{"layer", l.layer},
                          {"kind", to_string(l.kind)},
                          {"weights", l.weights},
                          {"dictionary_size", l.dictionary},
                          {"bits", l.bits},
                          {"baseline_bits", l.baseline_bits}});
    nlohmann::json j{{"layers", layers},
                     {"total_bits", r.total_bits},
                     {"baseline_bits", r.baseline_bits},
                     {"compression_ratio", r.compression_ratio()}};
    if (r.activations_included)
        j["activations"] = {{"bits_per_value", r.activation_bits},
                            {"peak_bits", r.activation_peak_bits},
                            {"sum_bits", r.activation_sum_bits}};
    return j;
}

nlohmann::json to_json(const SerializationStats& s) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : s.layers)
        layers.push_back({{"layer", l.layer},
                          {"dictionary_bits", l.dictionary_bits},
                          {"assignment_bits", l.assignment_bits},
                          {"padding_bits", l.padding_bits},
                          {"dense_weight_bits", l.dense_weight_bits},
                          {"payload_bits", l.payload_bits()}});
    return {{"layers", layers}, {"payload_bits", s.payload_bits()}, {"total_bytes", s.total_bytes}};
}

std::string format_text(const OpCountReport& r) {
    std::string out = fmt::format("execution mode: {}  (counts summed over {} samples)\n", to_string(r.mode), r.samples);
    out += fmt::format("{:>5} {:<10} {:>14} {:>14} {:>14} {:>14}\n", "layer", "kind", "mults", "shifts", "adds",
                       "lookups");
    auto row = [&](const std::string& idx, const std::string& kind, const OpCounts& c) {
        out += fmt::format("{:>5} {:<10} {:>14} {:>14} {:>14} {:>14}\n", idx, kind, c.multiplications, c.shifts,
                           c.additions, c.lookups);
    };
    for (const auto& l : r.layers) row(std::to_string(l.layer), to_string(l.kind), l.ops);
    row("", "total", r.totals());
    return out;
}

std::string format_text(const FootprintReport& r) {
    std::string out = fmt::format("{:>5} {:<8} {:>10} {:>6} {:>14} {:>14}\n", "layer", "kind", "N", "K", "bits",
                                  "float32 bits");
    for (const auto& l : r.layers)
        out += fmt::format("{:>5} {:<8} {:>10} {:>6} {:>14} {:>14}\n", l.layer, to_string(l.kind), l.weights,
                           l.dictionary ? std::to_string(l.dictionary) : "-", l.bits, l.baseline_bits);
    out += fmt::format("total parameter bits: {} ({:.1f} KiB), float32 baseline: {} bits, compression {:.3f}x\n",
                       r.total_bits, r.total_bits / 8192.0, r.baseline_bits, r.compression_ratio());
    if (r.activations_included)
        out += fmt::format("activations at {} bits: peak {} bits, sum {} bits (per sample)\n", r.activation_bits,
                           r.activation_peak_bits, r.activation_sum_bits);
    return out;
}

}  // namespace lutq
