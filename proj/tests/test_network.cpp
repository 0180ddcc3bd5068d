#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mixedsim/network.hpp"
#include "mixedsim/serialize.hpp"

using namespace mixedsim;

namespace {

// tiny net exercising every layer type: 8x8x1 -> conv3x2 -> BN -> ReLU
// -> pool -> dense 10
Network make_tiny_net(std::uint64_t seed) {
    Network net;
    net.in_h = 8;
    net.in_w = 8;
    net.in_ch = 1;
    net.classes = 10;
    CounterRng rng(seed, rng_stream::kWeightsInit);
    std::uint64_t ctr = 0;
    ConvLayer c{8, 8, 1, 2, 3};
    c.w.resize(2 * 1 * 3 * 3);
    c.b.assign(2, 0.0);
    for (double& v : c.w) v = rng.normal(ctr++, 0.0, 0.5);
    net.layers.emplace_back(c);
    net.layers.emplace_back(BatchNormLayer{2, 64, std::vector<double>(2, 1.0),
                                           std::vector<double>(2, 0.0),
                                           std::vector<double>(2, 0.0),
                                           std::vector<double>(2, 1.0)});
    net.layers.emplace_back(ReluLayer{128});
    net.layers.emplace_back(MaxPoolLayer{8, 8, 2});
    DenseLayer d{32, 10};
    d.w.resize(320);
    d.b.assign(10, 0.0);
    for (double& v : d.w) v = rng.normal(ctr++, 0.0, 0.3);
    net.layers.emplace_back(d);
    validate_network(net);
    return net;
}

Dataset make_tiny_batch(std::uint64_t seed, std::size_t n) {
    return make_blob_dataset(n, seed, 9, 8, 8, 10);
}

double loss_of(Network net, const std::vector<double>& x, const std::vector<int>& y, int n) {
    std::vector<std::vector<double>> acts;
    std::vector<LayerCache> caches;
    forward_network(net, x.data(), n, acts, &caches, true);
    std::vector<double> dl;
    return softmax_xent(acts.back(), y.data(), n, net.classes, dl);
}

}  // namespace

TEST_CASE("network shape validation") {
    Network net = make_tiny_net(1);
    CHECK_NOTHROW(validate_network(net));
    std::get<DenseLayer>(net.layers.back()).in = 31;
    CHECK_THROWS_AS(validate_network(net), std::invalid_argument);
}

TEST_CASE("analytic gradients match central differences") {
    Network net = make_tiny_net(3);
    Dataset ds = make_tiny_batch(3, 6);
    const int n = 6;
    std::vector<double> x(ds.images.begin(), ds.images.begin() + n * ds.sample_dim());
    std::vector<int> y(ds.labels.begin(), ds.labels.begin() + n);

    std::vector<std::vector<double>> acts;
    std::vector<LayerCache> caches;
    Network work = net;
    forward_network(work, x.data(), n, acts, &caches, true);
    std::vector<double> dl;
    softmax_xent(acts.back(), y.data(), n, net.classes, dl);
    GradBuffers grads = make_grad_buffers(net);
    backward_network(work, acts, caches, dl, n, grads);

    // probe parameters across every layer type
    struct Probe {
        double* p;
        double g;
    };
    std::vector<Probe> probes;
    int ws = 0, gs = 0;
    for (auto& l : net.layers) {
        if (auto* d = std::get_if<DenseLayer>(&l)) {
            for (std::size_t i = 0; i < d->w.size(); i += 37)
                probes.push_back({&d->w[i], grads.dw[ws][i]});
            probes.push_back({&d->b[0], grads.db[ws][0]});
            ++ws;
        } else if (auto* c = std::get_if<ConvLayer>(&l)) {
            for (std::size_t i = 0; i < c->w.size(); i += 3)
                probes.push_back({&c->w[i], grads.dw[ws][i]});
            probes.push_back({&c->b[1], grads.db[ws][1]});
            ++ws;
        } else if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
            probes.push_back({&bn->gamma[0], grads.dgamma[gs][0]});
            probes.push_back({&bn->beta[1], grads.dbeta[gs][1]});
            ++gs;
        }
    }
    REQUIRE(probes.size() >= 15);
    const double h = 1e-5;
    for (auto& pr : probes) {
        const double orig = *pr.p;
        *pr.p = orig + h;
        const double lp = loss_of(net, x, y, n);
        *pr.p = orig - h;
        const double lm = loss_of(net, x, y, n);
        *pr.p = orig;
        const double fd = (lp - lm) / (2.0 * h);
        CHECK(std::abs(pr.g - fd) <= 1e-4 * std::max({std::abs(fd), std::abs(pr.g), 1e-3}));
    }
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
    Network net = make_tiny_net(5);
    Network before = net;
    Dataset tr = make_tiny_batch(5, 32);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    train(net, tr, tr, cfg);
    const auto& d0 = std::get<DenseLayer>(before.layers.back());
    const auto& d1 = std::get<DenseLayer>(net.layers.back());
    CHECK(d0.w == d1.w);
    const auto& c0 = std::get<ConvLayer>(before.layers.front());
    const auto& c1 = std::get<ConvLayer>(net.layers.front());
    CHECK(c0.w == c1.w);
}

TEST_CASE("training reduces the loss on the tiny net") {
    Network net = make_tiny_net(7);
    Dataset tr = make_tiny_batch(7, 300);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.lr = 3e-3;
    cfg.batch_size = 20;
    cfg.seed = 7;
    auto hist = train(net, tr, tr, cfg);
    REQUIRE_FALSE(hist.diverged);
    CHECK(hist.loss.back() < hist.loss.front());
    CHECK(hist.val_acc.back() > 0.3);
}

TEST_CASE("evaluation is deterministic and stack identities hold") {
    Network net = make_tiny_net(9);
    Dataset ds = make_tiny_batch(9, 64);
    const double a1 = accuracy(net, ds);
    const double a2 = accuracy(net, ds);
    CHECK(a1 == a2);

    auto analog = prepare_analog(net, Technology::Memristor, MapScheme::Map1, ds, 32);
    ImperfectionStack empty;
    CHECK(evaluate_with_stack(net, analog, empty, ds, ds) == a1);

    ImperfectionStack t25;
    t25.temperature = 25.0;
    CHECK(evaluate_with_stack(net, analog, t25, ds, ds) == a1);

    // drop report with an empty stack is exactly zero
    auto rep = evaluate_accuracy_drop(net, analog, empty, ds, ds, {1, 2, 3});
    CHECK(rep.mean_drop == 0.0);
    CHECK(rep.std_drop == 0.0);
}

TEST_CASE("static nonlinearity vanishes on all-zero inputs") {
    Network net = make_tiny_net(11);
    Dataset zeros = make_tiny_batch(11, 8);
    std::fill(zeros.images.begin(), zeros.images.end(), 0.0);
    auto analog = prepare_analog(net, Technology::Memristor, MapScheme::Map1, zeros, 8);
    for (auto& al : analog) al.x_max = 1.0;  // zero batch would calibrate to ~0
    ImperfectionStack nl;
    nl.static_nonlinearity = true;
    EffectiveBuild eff = build_effective(net, analog, nl, zeros);
    AnalogContext actx;
    actx.layers = &analog;
    actx.eff = &eff.layers;
    actx.nonlinearity = true;
    std::vector<std::vector<double>> noisy_acts, clean_acts;
    Network n1 = eff.net, n2 = net;
    forward_network(n1, zeros.sample(0), 4, noisy_acts, nullptr, false, &actx);
    forward_network(n2, zeros.sample(0), 4, clean_acts, nullptr, false);
    for (std::size_t i = 0; i < clean_acts.back().size(); ++i)
        CHECK(noisy_acts.back()[i] == clean_acts.back()[i]);
}

TEST_CASE("noisy forward is seeded and reproducible") {
    Network net = make_tiny_net(13);
    Dataset ds = make_tiny_batch(13, 32);
    auto analog = prepare_analog(net, Technology::Eflash, MapScheme::Map2, ds, 32);
    ImperfectionStack st;
    st.noise_seed = 42;
    for (auto& al : analog) al.noise.rho = 1e-4;  // make it visible
    const double a1 = evaluate_with_stack(net, analog, st, ds, ds);
    const double a2 = evaluate_with_stack(net, analog, st, ds, ds);
    CHECK(a1 == a2);
    st.noise_seed = 43;
    // different seed gives a different (deterministic) result in general
    const double a3 = evaluate_with_stack(net, analog, st, ds, ds);
    (void)a3;  // no equality requirement either way
}

TEST_CASE("preactivation percentiles are ordered and clean at T=25") {
    Network net = make_tiny_net(15);
    Dataset ds = make_tiny_batch(15, 64);
    auto analog = prepare_analog(net, Technology::Memristor, MapScheme::Map2, ds, 32);
    ImperfectionStack clean;
    auto rows = preactivation_percentiles(net, analog, clean, ds, ds, 1, {0, 3}, {10, 50, 90});
    for (const auto& r : rows) {
        REQUIRE(r.values.size() == 3);
        CHECK(r.values[0] <= r.values[1]);
        CHECK(r.values[1] <= r.values[2]);
    }
    ImperfectionStack t25;
    t25.temperature = 25.0;
    auto rows25 = preactivation_percentiles(net, analog, t25, ds, ds, 1, {0, 3}, {10, 50, 90});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(rows[i].values[j] == rows25[i].values[j]);
}

TEST_CASE("blob dataset is deterministic and balanced") {
    Dataset a = make_blob_dataset(100, 5, 1);
    Dataset b = make_blob_dataset(100, 5, 1);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    std::vector<int> counts(10, 0);
    for (int l : a.labels) ++counts[l];
    for (int c : counts) CHECK(c == 10);
    for (double v : a.images) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    Dataset c = make_blob_dataset(100, 5, 2);
    CHECK(a.images != c.images);  // different split, same class prototypes
}

TEST_CASE("network JSON round-trip") {
    Network net = make_tiny_net(17);
    Dataset ds = make_tiny_batch(17, 16);
    json j = network_to_json(net);
    Network back = network_from_json(j);
    CHECK(accuracy(net, ds) == accuracy(back, ds));
    const auto& d0 = std::get<DenseLayer>(net.layers.back());
    const auto& d1 = std::get<DenseLayer>(back.layers.back());
    CHECK(d0.w == d1.w);
}

TEST_CASE("fault stack: retune beats no compensation on the tiny net") {
    Network net = make_tiny_net(19);
    Dataset tr = make_tiny_batch(19, 200);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 20;
    cfg.seed = 19;
    train(net, tr, tr, cfg);
    auto analog = prepare_analog(net, Technology::Memristor, MapScheme::Map1, tr, 64);

    double drop_none = 0.0, drop_retune = 0.0;
    std::size_t uncomp_seen = 0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull, 6ull}) {
        ImperfectionStack none;
        none.faults = FaultSpec{8e4, 1.0 / 3, 1.0 / 3, 1.0 / 3, seed, FaultCompensation::None};
        ImperfectionStack retune = none;
        retune.faults->compensation = FaultCompensation::Retune;
        std::size_t u = 0;
        const double clean = accuracy(net, tr);
        drop_none += clean - evaluate_with_stack(net, analog, none, tr, tr);
        drop_retune += clean - evaluate_with_stack(net, analog, retune, tr, tr, &u);
        uncomp_seen += u;
    }
    CHECK(drop_retune <= drop_none);
    (void)uncomp_seen;
}
