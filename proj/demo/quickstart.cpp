// Wraps four existing local models with a Stacking Wrapper, federates the translator in
// process, then compares local and wrapped predictions on the shared test set.

#include <cstdio>

#include "fedwrap/bank_surrogate.hpp"
#include "fedwrap/config.hpp"
#include "fedwrap/experiment.hpp"
#include "fedwrap/simulate.hpp"

using namespace fedwrap;

int main() {
    const auto pool = encode_table(make_bank_surrogate(4000, 7, 0.117), bank_schema());
    const auto part = make_partition(pool, {4, 1.0, PartitionMode::BankImbalanced, 7, 0.1});
    const auto& test = part.test_set;

    // Each client already owns a trained model; architectures differ.
    const TranslatorChoice archs[] = {{ModelKind::LogisticRegression, 0},
                                      {ModelKind::Mlp3, 16},
                                      {ModelKind::Mlp3, 24},
                                      {ModelKind::LogisticRegression, 0}};
    std::vector<WrapperConfig> cfgs(4);
    for (std::size_t k = 0; k < cfgs.size(); ++k) {
        auto& c = cfgs[k];
        c.client_id = client_name(k);
        for (std::size_t o = 0; o < cfgs.size(); ++o)
            if (o != k)
                c.clients.push_back(client_name(o));
        c.train_dataset = part.client_datasets[k];
        c.local_model =
            LocalModelHandle::from_model(train_local_model(archs[k], c.train_dataset, {0.05, 32, 5, 0.0, 0}, k));
        c.train = {0.1, 32, 5, 0.0, 100 + k};
        c.translator = translator_spec_for(c, ModelKind::Mlp3, 16);
    }

    FederationPlan plan;
    plan.rounds = 5;
    plan.translator_spec = cfgs.front().translator;
    plan.hp = cfgs.front().train;
    const auto sim = simulate(cfgs, plan, WrapperMode::Stacking);

    for (const auto& row : sim.server.log)
        std::printf("round %zu  mean client loss %.4f\n", row.round, row.mean_client_loss);

    std::printf("\nclient  model    local acc  wrapper acc\n");
    for (const auto& c : cfgs) {
        const auto& state = sim.states.at(c.client_id);
        std::size_t hit_local = 0, hit_wrapped = 0;
        for (std::size_t i = 0; i < test.n_rows(); ++i) {
            const auto x = test.row(i);
            hit_local += decide_label(c.local_model.predict_proba(x), c.threshold) == test.labels[i];
            hit_wrapped += wrapper_infer(c, state, x).label == test.labels[i];
        }
        const double n = static_cast<double>(test.n_rows());
        std::printf("%-7s %-8s %9.4f  %11.4f\n", c.client_id.c_str(), c.local_model.descriptor.c_str(),
                    hit_local / n, hit_wrapped / n);
    }

    // A trained wrapper is a drop-in predictor: save it, load it, call it like the local model.
    save_wrapper_state("quickstart_state.json", cfgs[0], sim.states.at("0"));
    const auto loaded = load_wrapper_state("quickstart_state.json");
    const auto out = wrapper_infer(loaded.cfg, loaded.state, test.row(0));
    std::printf("\nreloaded client 0, row 0: p(yes) = %.4f, label %d\n", out.probs[1], out.label);
}
