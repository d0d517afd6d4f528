#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedseg/model.hpp"
#include "fedseg/strategies.hpp"
#include "fedseg/wire.hpp"

namespace fedseg {

class socket_fd {
public:
    socket_fd() = default;
    explicit socket_fd(int fd) : fd_(fd) {}
    socket_fd(socket_fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    socket_fd& operator=(socket_fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = o.fd_;
            o.fd_ = -1;
        }
        return *this;
    }
    socket_fd(const socket_fd&) = delete;
    socket_fd& operator=(const socket_fd&) = delete;
    ~socket_fd() { reset(); }

    int get() const { return fd_; }
    bool valid() const { return fd_ >= 0; }

    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

namespace net {

using clock = std::chrono::steady_clock;

inline int remaining_ms(clock::time_point deadline) {
    const auto left =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now())
            .count();
    return left > 0 ? static_cast<int>(left) : 0;
}

inline sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw protocol_error("bad IPv4 address '" + host + "'");
    return addr;
}

// Binds and listens; for port 0 the kernel-chosen port is written back.
inline socket_fd listen_on(const std::string& host, std::uint16_t& port, int backlog = 64) {
    socket_fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd.valid()) throw protocol_error("socket() failed");
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = make_addr(host, port);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
        throw protocol_error("bind " + host + ":" + std::to_string(port) + " failed: " +
                             std::strerror(errno));
    if (::listen(fd.get(), backlog) != 0)
        throw protocol_error(std::string("listen failed: ") + std::strerror(errno));
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    if (::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&bound), &len) == 0)
        port = ntohs(bound.sin_port);
    return fd;
}

inline socket_fd accept_on(const socket_fd& listener, clock::time_point deadline) {
    for (;;) {
        pollfd pf{listener.get(), POLLIN, 0};
        const int rc = ::poll(&pf, 1, remaining_ms(deadline));
        if (rc < 0 && errno == EINTR) continue;
        if (rc <= 0) throw protocol_error("timed out waiting for a collaborator to connect");
        const int cfd = ::accept(listener.get(), nullptr, nullptr);
        if (cfd < 0) {
            if (errno == EINTR) continue;
            throw protocol_error(std::string("accept failed: ") + std::strerror(errno));
        }
        const int one = 1;
        ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        return socket_fd(cfd);
    }
}

// Connects, retrying while the peer is not listening yet, until the deadline.
inline socket_fd connect_to(const std::string& host, std::uint16_t port,
                            clock::time_point deadline) {
    const sockaddr_in addr = make_addr(host, port);
    for (;;) {
        socket_fd fd(::socket(AF_INET, SOCK_STREAM, 0));
        if (!fd.valid()) throw protocol_error("socket() failed");
        if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
            const int one = 1;
            ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return fd;
        }
        if ((errno == ECONNREFUSED || errno == ETIMEDOUT || errno == EINTR) &&
            remaining_ms(deadline) > 0) {
            ::usleep(50 * 1000);
            continue;
        }
        throw protocol_error("connect " + host + ":" + std::to_string(port) +
                             " failed: " + std::strerror(errno));
    }
}

} // namespace net

// One framed TCP connection: outgoing frames are written whole; incoming
// bytes are buffered until a full frame decodes. Every irregularity (timeout,
// peer close, undecodable frame) throws its typed failure: sessions are
// fail-stop, nothing is retried.
class wire_conn {
public:
    wire_conn() = default;
    explicit wire_conn(socket_fd fd) : fd_(std::move(fd)) {}

    bool valid() const { return fd_.valid(); }

    void send(const wire_message& msg) {
        const auto frame = encode_frame(msg);
        std::size_t off = 0;
        while (off < frame.size()) {
            const ssize_t n = ::send(fd_.get(), frame.data() + off, frame.size() - off,
                                     MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw protocol_error(std::string("send failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    wire_message recv(net::clock::time_point deadline) {
        for (;;) {
            if (!buf_.empty()) {
                const decode_result r = decode_frame(buf_.data(), buf_.size());
                if (r.status == decode_status::ok) {
                    buf_.erase(buf_.begin(),
                               buf_.begin() + static_cast<std::ptrdiff_t>(r.consumed));
                    return r.message;
                }
                if (r.status != decode_status::incomplete) throw_decode_failure(r.status);
            }
            pollfd pf{fd_.get(), POLLIN, 0};
            const int rc = ::poll(&pf, 1, net::remaining_ms(deadline));
            if (rc < 0 && errno == EINTR) continue;
            if (rc <= 0) throw protocol_error("timed out waiting for a frame");
            std::uint8_t chunk[65536];
            const ssize_t n = ::recv(fd_.get(), chunk, sizeof chunk, 0);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw protocol_error(std::string("recv failed: ") + std::strerror(errno));
            }
            if (n == 0) throw protocol_error("peer closed the connection");
            buf_.insert(buf_.end(), chunk, chunk + n);
        }
    }

private:
    socket_fd fd_;
    std::vector<std::uint8_t> buf_;
};

namespace detail {

template <class M>
M expect_msg(wire_message msg, const char* what) {
    if (auto* e = std::get_if<error_msg>(&msg))
        throw protocol_error("peer reported error " + std::to_string(e->code) + ": " +
                             e->text);
    if (auto* m = std::get_if<M>(&msg)) return std::move(*m);
    throw protocol_error(std::string("expected ") + what + " message");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Aggregator
// ---------------------------------------------------------------------------

struct serve_options {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0; // 0 picks an ephemeral port
    int institutions = 1;
    int timeout_ms = 120000; // per message exchange
    strategy_kind kind = strategy_kind::federated;
    strategy_options so;
    model_spec ms;
    std::uint64_t seed = 1;
    // Called once the listening socket is bound, with the actual port.
    std::function<void(std::uint16_t)> on_listening;
};

namespace detail {

struct collaborator_link {
    wire_conn conn;
    hello_msg hello;
};

} // namespace detail

// Runs one collaborative session as the coordinating side: waits for the
// expected number of collaborators, drives the chosen strategy over the wire
// (parameters only; data never leaves the institutions), and broadcasts the
// final model. Model initialization and visit ordering match the in-process
// runners, so a wire session with the same master seed converges to bitwise
// identical parameters. Logged global scores are the sample-weighted mean of
// the institutions' local validation scores from a score sweep; per-visit
// epoch counts live in the collaborators' own logs.
inline run_result<float> aggregator_serve(const serve_options& opt) {
    if (opt.kind == strategy_kind::centralized)
        throw config_error("aggregator_serve: centralized pooling is not a wire strategy");
    if (opt.institutions < 1)
        throw config_error("aggregator_serve: need at least one collaborator");
    if (opt.kind == strategy_kind::federated &&
        opt.so.moments == adam_policy::aggregate_moments)
        throw config_error(
            "aggregator_serve: aggregate_moments needs optimizer state on the "
            "coordinator; use keep_local or reset_each_round over the wire");
    if (opt.kind != strategy_kind::federated && !opt.so.reset_moments_on_handoff)
        throw config_error(
            "aggregator_serve: optimizer state cannot travel between institutions; "
            "reset_moments_on_handoff must stay enabled over the wire");

    std::uint16_t port = opt.port;
    socket_fd listener = net::listen_on(opt.host, port);
    if (opt.on_listening) opt.on_listening(port);
    const auto handshake_deadline =
        net::clock::now() + std::chrono::milliseconds(opt.timeout_ms);

    trainable_model<float> m(opt.ms);
    m.init(opt.seed);
    const std::uint32_t topo = topology_hash(m.net.manifest());
    const std::size_t dim = manifest_count(m.net.manifest());

    std::vector<detail::collaborator_link> links;
    for (int i = 0; i < opt.institutions; ++i) {
        wire_conn conn(net::accept_on(listener, handshake_deadline));
        hello_msg hello =
            detail::expect_msg<hello_msg>(conn.recv(handshake_deadline), "hello");
        links.push_back({std::move(conn), hello});
    }
    std::sort(links.begin(), links.end(), [](const auto& a, const auto& b) {
        return a.hello.institution_id < b.hello.institution_id;
    });

    auto fail_all = [&](const std::string& why) {
        for (auto& l : links) {
            try {
                l.conn.send(error_msg{1, why});
            } catch (const error&) {
            }
        }
    };

    try {
        for (std::size_t i = 0; i < links.size(); ++i) {
            const auto& h = links[i].hello;
            if (h.institution_id != i)
                throw config_error(
                    "collaborator roster must cover institution ids 0.." +
                    std::to_string(opt.institutions - 1) + " exactly; got id " +
                    std::to_string(h.institution_id));
            if (h.train_count == 0)
                throw protocol_error("institution " + std::to_string(h.institution_id) +
                                     " reports no training samples");
        }

        auto deadline = [&] {
            return net::clock::now() + std::chrono::milliseconds(opt.timeout_ms);
        };
        auto broadcast = [&](const wire_message& msg) {
            for (auto& l : links) l.conn.send(msg);
        };
        // One score sweep: collaborators evaluate the current params on their
        // local validation subjects; returns each institution's score (in id
        // order) plus the val-count-weighted mean standing in for the global
        // holdout score of in-process mode.
        auto val_sweep = [&](std::vector<double>& per_inst) {
            broadcast(val_request_msg{m.params.values});
            double num = 0;
            std::uint64_t den = 0;
            const auto dl = deadline();
            for (auto& l : links) {
                const auto resp =
                    detail::expect_msg<val_response_msg>(l.conn.recv(dl), "val_response");
                per_inst.push_back(resp.val_count
                                       ? resp.val_dice
                                       : std::numeric_limits<double>::quiet_NaN());
                num += resp.val_dice * static_cast<double>(resp.val_count);
                den += resp.val_count;
            }
            return den ? num / static_cast<double>(den)
                       : std::numeric_limits<double>::quiet_NaN();
        };

        run_result<float> r;
        r.log.strategy = strategy_kind_name(opt.kind);
        r.log.seed = opt.seed;

        auto log_step = [&](const char* kind, int index, const detail::step_clock& clock,
                            bool sweep) {
            run_step s;
            s.kind = kind;
            s.index = index;
            if (sweep) s.global_val_dice = val_sweep(s.per_inst_val_dice);
            s.wall_ms = clock.elapsed_ms();
            s.params_crc = params_crc32(m.params.values);
            r.log.steps.push_back(s);
        };

        auto make_task = [&](int round, strategy_tag tag, std::uint32_t epochs,
                             std::int32_t patience, bool reset) {
            task_msg t;
            t.round = static_cast<std::uint32_t>(round);
            t.strategy = static_cast<std::uint8_t>(tag);
            t.epochs = epochs;
            t.patience = patience;
            t.reset_moments = static_cast<std::uint8_t>(reset);
            t.topology = topo;
            t.params = m.params.values;
            return t;
        };

        auto checked_update = [&](detail::collaborator_link& l, int round) {
            auto u = detail::expect_msg<update_msg>(l.conn.recv(deadline()), "update");
            if (u.round != static_cast<std::uint32_t>(round))
                throw protocol_error("institution " +
                                     std::to_string(l.hello.institution_id) +
                                     " answered for round " + std::to_string(u.round) +
                                     " during round " + std::to_string(round));
            if (u.params.size() != dim)
                throw protocol_error("institution " +
                                     std::to_string(l.hello.institution_id) +
                                     " sent a mismatched parameter count");
            return u;
        };

        if (opt.kind == strategy_kind::federated) {
            const bool reset = opt.so.moments == adam_policy::reset_each_round;
            for (int round = 0; round < opt.so.rounds; ++round) {
                detail::step_clock clock(opt.so.record_wall_time);
                broadcast(make_task(round, strategy_tag::federated,
                                    static_cast<std::uint32_t>(opt.so.epochs_per_round), -1,
                                    reset));
                std::vector<model_update<float>> updates;
                for (auto& l : links) {
                    auto u = checked_update(l, round);
                    updates.push_back({static_cast<int>(l.hello.institution_id), round,
                                       u.n_samples, std::move(u.params)});
                }
                m.params.values = aggregate_weighted(std::move(updates));
                log_step("round", round, clock, true);
            }
        } else {
            std::vector<std::uint64_t> counts;
            std::vector<int> ids;
            for (const auto& l : links) {
                counts.push_back(l.hello.train_count);
                ids.push_back(static_cast<int>(l.hello.institution_id));
            }
            const bool iil = opt.kind == strategy_kind::iil;
            const int passes = iil ? 1 : opt.so.cycles;
            int visit = 0;
            for (int pass = 0; pass < passes; ++pass) {
                const auto order =
                    detail::visit_positions(counts, ids, opt.so.order, opt.seed, pass);
                for (std::size_t pos : order) {
                    auto& l = links[pos];
                    detail::step_clock clock(opt.so.record_wall_time);
                    const auto task =
                        iil ? make_task(pass, strategy_tag::iil,
                                        static_cast<std::uint32_t>(opt.so.max_epochs_per_visit),
                                        opt.so.patience, true)
                            : make_task(pass, strategy_tag::ciil,
                                        static_cast<std::uint32_t>(opt.so.epochs_per_cycle_stop),
                                        -1, true);
                    l.conn.send(task);
                    auto u = checked_update(l, pass);
                    m.params.values = std::move(u.params);
                    log_step("visit", visit++, clock, iil);
                }
                if (!iil) {
                    detail::step_clock clock(false);
                    log_step("cycle", pass, clock, true);
                }
            }
        }

        broadcast(final_msg{m.params.values});
        r.params = m.params;
        r.log.final_params_crc = params_crc32(m.params.values);
        for (auto it = r.log.steps.rbegin(); it != r.log.steps.rend(); ++it)
            if (!std::isnan(it->global_val_dice)) {
                r.log.final_dice = it->global_val_dice;
                break;
            }
        return r;
    } catch (const error&) {
        fail_all("session aborted");
        throw;
    }
}

// ---------------------------------------------------------------------------
// Collaborator
// ---------------------------------------------------------------------------

struct collaborate_options {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
    int institution_id = 0;
    model_spec ms;
    int batch_size = 64;
    opt_kind optimizer = opt_kind::adam;
    double learning_rate = 5e-4;
    std::uint64_t seed = 1;
    int timeout_ms = 120000;
};

// Joins a session, trains on the local shard whenever tasked, answers score
// sweeps from local validation data, and returns the final broadcast model
// plus a log of the visits it served. Local randomness is derived from
// (seed, task round, institution id), so a wire session reproduces the
// equivalent in-process run exactly.
inline run_result<float> collaborator_run(const collaborate_options& opt,
                                          const institution_shard& shard) {
    const auto deadline0 =
        net::clock::now() + std::chrono::milliseconds(opt.timeout_ms);
    wire_conn conn(net::connect_to(opt.host, opt.port, deadline0));

    trainable_model<float> m(opt.ms);
    m.opt.kind = opt.optimizer;
    m.opt.learning_rate = opt.learning_rate;
    const auto train = shard.train_slices();
    const auto val = shard.val_slices();
    const std::uint32_t topo = topology_hash(m.net.manifest());
    const std::size_t dim = manifest_count(m.net.manifest());

    conn.send(hello_msg{static_cast<std::uint32_t>(opt.institution_id), train.size(),
                        val.size()});

    auto deadline = [&] {
        return net::clock::now() + std::chrono::milliseconds(opt.timeout_ms);
    };

    run_result<float> r;
    r.log.seed = opt.seed;
    int val_answers = 0;

    for (;;) {
        wire_message msg = conn.recv(deadline());
        if (auto* e = std::get_if<error_msg>(&msg))
            throw protocol_error("aggregator error " + std::to_string(e->code) + ": " +
                                 e->text);
        if (auto* f = std::get_if<final_msg>(&msg)) {
            if (f->params.size() != dim)
                throw protocol_error("final model has wrong parameter count");
            m.params.values = std::move(f->params);
            r.params = m.params;
            r.log.final_params_crc = params_crc32(m.params.values);
            return r;
        }
        if (auto* v = std::get_if<val_request_msg>(&msg)) {
            if (v->params.size() != dim)
                throw protocol_error("score request has wrong parameter count");
            m.params.values = std::move(v->params);
            val_response_msg resp;
            resp.val_count = val.size();
            resp.val_dice = val.empty() ? 0.0 : evaluate(m.net, m.params, val);
            conn.send(resp);
            run_step s;
            s.kind = "val";
            s.index = val_answers++;
            s.per_inst_val_dice = {val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                               : resp.val_dice};
            s.params_crc = params_crc32(m.params.values);
            r.log.steps.push_back(s);
            continue;
        }
        if (auto* t = std::get_if<task_msg>(&msg)) {
            if (t->topology != topo) {
                conn.send(error_msg{3, "model topology mismatch"});
                throw version_error("task topology " + std::to_string(t->topology) +
                                    " does not match this collaborator's model");
            }
            if (t->params.size() != dim) {
                conn.send(error_msg{2, "parameter count mismatch"});
                throw protocol_error("task has wrong parameter count");
            }
            const auto tag = static_cast<strategy_tag>(t->strategy);
            if (tag != strategy_tag::federated && tag != strategy_tag::ciil &&
                tag != strategy_tag::iil) {
                conn.send(error_msg{4, "unknown strategy tag"});
                throw protocol_error("task carries an unknown strategy tag");
            }
            if (r.log.strategy.empty())
                r.log.strategy = strategy_kind_name(
                    tag == strategy_tag::federated ? strategy_kind::federated
                    : tag == strategy_tag::ciil    ? strategy_kind::ciil
                                                   : strategy_kind::iil);

            m.params.values = std::move(t->params);
            if (t->reset_moments) {
                m.opt = optimizer_state<float>{};
                m.opt.kind = opt.optimizer;
                m.opt.learning_rate = opt.learning_rate;
            }
            rng_stream rng(detail::visit_seed(opt.seed, static_cast<int>(t->round),
                                              opt.institution_id));
            update_msg u;
            u.round = t->round;
            u.n_samples = train.size();
            if (t->patience >= 0 || tag != strategy_tag::federated) {
                train_options to;
                to.batch_size = opt.batch_size;
                to.track_train_dice = false;
                if (t->patience >= 0) {
                    to.patience = t->patience;
                    to.max_epochs = static_cast<int>(t->epochs);
                    to.restore_best = true;
                } else {
                    to.epochs = static_cast<int>(t->epochs);
                }
                const train_report rep = train_local(m, shard, to, rng);
                r.log.visits.push_back(
                    {opt.institution_id, rep.epochs_run, rep.stopped_early});
                u.local_val_dice =
                    t->patience >= 0 ? rep.best_val_dice : rep.final_val_dice;
            } else {
                if (train.empty())
                    throw precondition_error("collaborator has no training slices");
                for (std::uint32_t e = 0; e < t->epochs; ++e)
                    train_epoch(m, train, opt.batch_size, rng);
                r.log.visits.push_back(
                    {opt.institution_id, static_cast<int>(t->epochs), false});
            }
            u.params = m.params.values;
            conn.send(u);

            run_step s;
            s.kind = tag == strategy_tag::federated ? "round" : "visit";
            s.index = static_cast<int>(t->round);
            s.params_crc = params_crc32(m.params.values);
            r.log.steps.push_back(s);
            continue;
        }
        throw protocol_error("unexpected message from aggregator");
    }
}

} // namespace fedseg
