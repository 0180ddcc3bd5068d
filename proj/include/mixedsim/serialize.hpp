#pragma once

#include <json.hpp>
#include <stdexcept>
#include <string>

#include "mixedsim/network.hpp"

namespace mixedsim {

using json = nlohmann::json;

inline json network_to_json(const Network& net) {
    json j;
    j["version"] = 1;
    j["in_h"] = net.in_h;
    j["in_w"] = net.in_w;
    j["in_ch"] = net.in_ch;
    j["classes"] = net.classes;
    json layers = json::array();
    for (const auto& l : net.layers) {
        json e;
        if (const auto* d = std::get_if<DenseLayer>(&l)) {
            e["type"] = "dense";
            e["in"] = d->in;
            e["out"] = d->out;
            e["w"] = d->w;
            e["b"] = d->b;
        } else if (const auto* c = std::get_if<ConvLayer>(&l)) {
            e["type"] = "conv";
            e["in_h"] = c->in_h;
            e["in_w"] = c->in_w;
            e["in_ch"] = c->in_ch;
            e["out_ch"] = c->out_ch;
            e["k"] = c->k;
            e["w"] = c->w;
            e["b"] = c->b;
        } else if (const auto* bn = std::get_if<BatchNormLayer>(&l)) {
            e["type"] = "batch_norm";
            e["features"] = bn->features;
            e["spatial"] = bn->spatial;
            e["gamma"] = bn->gamma;
            e["beta"] = bn->beta;
            e["run_mean"] = bn->run_mean;
            e["run_var"] = bn->run_var;
        } else if (const auto* r = std::get_if<ReluLayer>(&l)) {
            e["type"] = "relu";
            e["size"] = r->size;
        } else if (const auto* p = std::get_if<MaxPoolLayer>(&l)) {
            e["type"] = "max_pool";
            e["in_h"] = p->in_h;
            e["in_w"] = p->in_w;
            e["ch"] = p->ch;
        }
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    return j;
}

inline Network network_from_json(const json& j) {
    if (j.at("version").get<int>() != 1) throw std::runtime_error("unsupported network version");
    Network net;
    net.in_h = j.at("in_h").get<int>();
    net.in_w = j.at("in_w").get<int>();
    net.in_ch = j.at("in_ch").get<int>();
    net.classes = j.at("classes").get<int>();
    for (const auto& e : j.at("layers")) {
        const std::string type = e.at("type").get<std::string>();
        if (type == "dense") {
            DenseLayer d;
            d.in = e.at("in").get<int>();
            d.out = e.at("out").get<int>();
            d.w = e.at("w").get<std::vector<double>>();
            d.b = e.at("b").get<std::vector<double>>();
            net.layers.emplace_back(std::move(d));
        } else if (type == "conv") {
            ConvLayer c;
            c.in_h = e.at("in_h").get<int>();
            c.in_w = e.at("in_w").get<int>();
            c.in_ch = e.at("in_ch").get<int>();
            c.out_ch = e.at("out_ch").get<int>();
            c.k = e.at("k").get<int>();
            c.w = e.at("w").get<std::vector<double>>();
            c.b = e.at("b").get<std::vector<double>>();
            net.layers.emplace_back(std::move(c));
        } else if (type == "batch_norm") {
            BatchNormLayer bn;
            bn.features = e.at("features").get<int>();
            bn.spatial = e.at("spatial").get<int>();
            bn.gamma = e.at("gamma").get<std::vector<double>>();
            bn.beta = e.at("beta").get<std::vector<double>>();
            bn.run_mean = e.at("run_mean").get<std::vector<double>>();
            bn.run_var = e.at("run_var").get<std::vector<double>>();
            net.layers.emplace_back(std::move(bn));
        } else if (type == "relu") {
            net.layers.emplace_back(ReluLayer{e.at("size").get<int>()});
        } else if (type == "max_pool") {
            net.layers.emplace_back(
                MaxPoolLayer{e.at("in_h").get<int>(), e.at("in_w").get<int>(),
                             e.at("ch").get<int>()});
        } else {
            throw std::runtime_error("unknown layer type " + type);
        }
    }
    validate_network(net);
    return net;
}

}  // namespace mixedsim
