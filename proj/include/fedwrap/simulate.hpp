#pragma once

// In-process transport: the coordinator and every client agent exchange encoded frames
// through queues. Single-threaded; clients are stepped in sorted-id order.

#include <algorithm>
#include <deque>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedwrap/client_agent.hpp"
#include "fedwrap/coordinator.hpp"
#include "fedwrap/federation.hpp"

namespace fedwrap {

struct SimulationOptions {
    std::string token = "simulation";
    /// Per-round evaluation; runs with the training clock paused.
    Coordinator::RoundHook round_hook;
};

struct SimulationResult {
    CoordinatorResult server;
    std::map<std::string, WrapperState> states;
};

/// Runs a whole federation in one process. `plan.expected_clients` and `plan.mode` are
/// taken from the arguments; each config's token is replaced by the simulation token.
inline SimulationResult simulate(std::vector<WrapperConfig> cfgs, FederationPlan plan,
                                 WrapperMode mode, const SimulationOptions& opt = {}) {
    if (cfgs.empty())
        throw ConfigError("simulate: no clients");
    std::sort(cfgs.begin(), cfgs.end(),
              [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
    plan.mode = mode;
    plan.expected_clients.clear();
    for (auto& c : cfgs) {
        c.token = opt.token;
        if (!plan.expected_clients.insert(c.client_id).second)
            throw ConfigError("simulate: duplicate client id '" + c.client_id + "'");
    }

    Stopwatch clock;
    Coordinator::RoundHook hook;
    if (opt.round_hook)
        hook = [&](std::size_t r, const Params& p) {
            clock.pause();
            auto v = opt.round_hook(r, p);
            clock.start();
            return v;
        };
    Coordinator server(plan, opt.token, [&] { return clock.elapsed_ms(); }, hook);

    std::vector<ClientAgent> agents;
    for (auto& c : cfgs)
        agents.emplace_back(std::move(c), mode);

    const std::size_t n = agents.size();
    std::vector<std::deque<std::string>> inbox(n);
    std::vector<bool> closed(n, false);
    std::deque<std::pair<ConnId, std::string>> to_server;

    clock.start();
    for (std::size_t i = 0; i < n; ++i)
        to_server.emplace_back(i, encode(agents[i].hello()));

    bool progress = true;
    while (progress) {
        progress = false;
        while (!to_server.empty()) {
            auto [from, frame] = std::move(to_server.front());
            to_server.pop_front();
            progress = true;
            for (auto& o : server.on_message(from, decode(frame))) {
                inbox[o.to].push_back(encode(o.msg));
                if (o.close)
                    closed[o.to] = true;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            while (!inbox[i].empty()) {
                const auto msg = decode(inbox[i].front());
                inbox[i].pop_front();
                progress = true;
                if (msg.kind == MsgKind::Error)
                    throw FederationError(server.finished() && !server.result().error.empty()
                                              ? server.result().error
                                              : error_text(msg));
                for (const auto& reply : agents[i].on_message(msg))
                    if (!closed[i])
                        to_server.emplace_back(i, encode(reply));
            }
        }
    }
    clock.pause();

    SimulationResult res;
    res.server = server.result();
    if (res.server.phase != ServerPhase::Done)
        throw FederationError("simulation stalled in server phase " + to_string(res.server.phase));
    for (auto& a : agents) {
        if (!a.finished())
            throw FederationError("client '" + a.config().client_id + "' did not finish");
        res.states.emplace(a.config().client_id, a.take_state());
    }
    return res;
}

} // namespace fedwrap
