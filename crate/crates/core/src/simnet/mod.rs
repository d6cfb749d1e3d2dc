//! Deterministic discrete-event simulation of datacenters exchanging messages.
//!
//! Everything runs on one logical timeline. Protocol activities are ordinary
//! `async` code driven by a small single-threaded executor; the only ways to
//! wait are [`Sim::sleep`] and the [`Gather`] returned by [`Sim::request`],
//! both of which complete from events in the time-ordered queue. Ties are
//! broken by insertion order, and all randomness comes from one seeded RNG,
//! so a run is a pure function of its configuration and seed.

mod topology;

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use topology::{OutageWindow, Topology, TopologyError, PRESETS};

use crate::messages::MessageMeta;

/// Simulated time in microseconds.
pub type SimTime = u64;

pub const fn millis(ms: u64) -> SimTime {
    ms * 1000
}

pub fn millis_f(ms: f64) -> SimTime {
    (ms * 1000.0).round() as SimTime
}

pub fn as_millis(t: SimTime) -> f64 {
    t as f64 / 1000.0
}

/// A message source or destination. Only the service tier of a datacenter
/// goes offline during an outage; clients keep running and fail over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Endpoint {
    Client { id: u32, dc: usize },
    Service { dc: usize },
}

impl Endpoint {
    pub fn dc(&self) -> usize {
        match *self {
            Endpoint::Client { dc, .. } | Endpoint::Service { dc } => dc,
        }
    }
}

/// One sent message as seen by the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub sent_at: SimTime,
    pub from: Endpoint,
    pub to: Endpoint,
    #[serde(flatten)]
    pub meta: MessageMeta,
    pub lost: bool,
}

type Event<S> = Box<dyn FnOnce(&Sim<S>)>;
type LocalTask = Pin<Box<dyn Future<Output = ()>>>;

struct Scheduled<S> {
    at: SimTime,
    seq: u64,
    event: Event<S>,
}

impl<S> PartialEq for Scheduled<S> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<S> Eq for Scheduled<S> {}

impl<S> PartialOrd for Scheduled<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<S> Ord for Scheduled<S> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Core<S> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<S>>,
    rng: ChaCha8Rng,
    topology: Topology,
    traffic: Vec<TrafficRecord>,
    spawned: Vec<LocalTask>,
    fired: u64,
}

struct Inner<S> {
    core: RefCell<Core<S>>,
    state: RefCell<S>,
    tasks: RefCell<BTreeMap<u64, LocalTask>>,
    ready: Arc<Mutex<VecDeque<u64>>>,
    next_task: Cell<u64>,
}

/// Handle to a simulation; cheap to clone, shared by every task.
pub struct Sim<S> {
    inner: Rc<Inner<S>>,
}

impl<S> Clone for Sim<S> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

struct TaskWaker {
    id: u64,
    ready: Arc<Mutex<VecDeque<u64>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.ready.lock().expect("ready queue lock").push_back(self.id);
    }
}

impl<S: 'static> Sim<S> {
    pub fn new(topology: Topology, seed: u64, state: S) -> Self {
        let core = Core {
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            topology,
            traffic: Vec::new(),
            spawned: Vec::new(),
            fired: 0,
        };
        Self {
            inner: Rc::new(Inner {
                core: RefCell::new(core),
                state: RefCell::new(state),
                tasks: RefCell::new(BTreeMap::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                next_task: Cell::new(0),
            }),
        }
    }

    pub fn now(&self) -> SimTime {
        self.inner.core.borrow().now
    }

    pub fn topology(&self) -> Topology {
        self.inner.core.borrow().topology.clone()
    }

    pub fn datacenters(&self) -> usize {
        self.inner.core.borrow().topology.datacenters()
    }

    pub fn timeout(&self) -> SimTime {
        self.inner.core.borrow().topology.timeout()
    }

    pub fn rtt_max(&self) -> SimTime {
        self.inner.core.borrow().topology.rtt_max()
    }

    /// Number of queue events executed so far.
    pub fn fired_events(&self) -> u64 {
        self.inner.core.borrow().fired
    }

    /// Runs `f` with exclusive access to the application state. Must not be
    /// re-entered from inside `f`.
    pub fn with_state<R>(&self, f: impl FnOnce(&mut S) -> R) -> R {
        f(&mut self.inner.state.borrow_mut())
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.inner.core.borrow_mut().rng)
    }

    pub fn traffic(&self) -> Vec<TrafficRecord> {
        self.inner.core.borrow().traffic.clone()
    }

    /// True if the service tier of `datacenter` is offline at the current time.
    pub fn is_down(&self, datacenter: usize) -> bool {
        let core = self.inner.core.borrow();
        core.topology.is_down(datacenter, core.now)
    }

    /// Schedules `event` to run `delay` after now.
    pub fn schedule(&self, delay: SimTime, event: impl FnOnce(&Sim<S>) + 'static) {
        let mut core = self.inner.core.borrow_mut();
        let at = core.now + delay;
        let seq = core.next_seq;
        core.next_seq += 1;
        core.queue.push(Scheduled { at, seq, event: Box::new(event) });
    }

    pub fn spawn(&self, task: impl Future<Output = ()> + 'static) {
        self.inner.core.borrow_mut().spawned.push(Box::pin(task));
    }

    /// Spawns `task` and returns a slot that holds its output once it finishes.
    pub fn spawn_with_result<T: 'static>(&self, task: impl Future<Output = T> + 'static) -> TaskResult<T> {
        let slot = Rc::new(RefCell::new(None));
        let out = Rc::clone(&slot);
        self.spawn(async move {
            let value = task.await;
            *out.borrow_mut() = Some(value);
        });
        TaskResult(slot)
    }

    pub fn sleep(&self, duration: SimTime) -> Sleep {
        let slot = Rc::new(RefCell::new(SleepState { fired: false, waker: None }));
        let fire = Rc::clone(&slot);
        self.schedule(duration, move |_| {
            let mut st = fire.borrow_mut();
            st.fired = true;
            if let Some(w) = st.waker.take() {
                w.wake();
            }
        });
        Sleep(slot)
    }

    fn is_offline(topology: &Topology, endpoint: Endpoint, at: SimTime) -> bool {
        matches!(endpoint, Endpoint::Service { .. }) && topology.is_down(endpoint.dc(), at)
    }

    /// Sends a one-way message. Delivery runs `deliver` at the destination.
    /// Same-datacenter traffic is immediate and lossless; remote traffic
    /// takes half the round trip with jitter, and is lost with the topology's
    /// loss probability, when it would arrive after the timeout, or when
    /// either end is offline. Returns whether the message will be delivered.
    pub fn send(
        &self,
        from: Endpoint,
        to: Endpoint,
        meta: MessageMeta,
        deliver: impl FnOnce(&Sim<S>) + 'static,
    ) -> bool {
        let delay = {
            let mut core = self.inner.core.borrow_mut();
            let now = core.now;
            let (delay, mut lost) = if from.dc() == to.dc() {
                (0, false)
            } else {
                let one_way = core.topology.rtt(from.dc(), to.dc()) as f64 / 2.0;
                let jitter = core.topology.jitter;
                let factor = 1.0 + jitter * core.rng.gen_range(-1.0..=1.0);
                let loss_draw: f64 = core.rng.gen();
                let delay = (one_way * factor).round() as SimTime;
                let lost = loss_draw < core.topology.loss || delay >= core.topology.timeout();
                (delay, lost)
            };
            lost |= Self::is_offline(&core.topology, from, now) || Self::is_offline(&core.topology, to, now + delay);
            core.traffic.push(TrafficRecord { sent_at: now, from, to, meta, lost });
            if lost {
                return false;
            }
            delay
        };
        self.schedule(delay, deliver);
        true
    }

    /// Sends one request to each target and gathers replies until every
    /// target has answered or the message timeout expires, whichever comes
    /// first. `handler` runs at each target on delivery and answers through
    /// its [`Responder`], possibly later.
    pub fn request<R: 'static>(
        &self,
        from: Endpoint,
        targets: &[Endpoint],
        meta: impl Fn(Endpoint) -> MessageMeta,
        handler: impl Fn(&Sim<S>, Endpoint, Responder<R>) + 'static,
    ) -> Gather<R> {
        let deadline = self.now() + self.timeout();
        let state = Rc::new(RefCell::new(GatherState {
            replies: Vec::new(),
            expected: targets.len(),
            deadline,
            done: targets.is_empty(),
            waker: None,
        }));
        if !targets.is_empty() {
            // Scheduled before any reply, so a reply landing exactly on the
            // deadline is ordered after it and excluded.
            let st = Rc::clone(&state);
            self.schedule(deadline - self.now(), move |_| st.borrow_mut().finish());
        }
        let handler = Rc::new(handler);
        for &target in targets {
            let responder = Responder { state: Rc::clone(&state), server: target, client: from };
            let handler = Rc::clone(&handler);
            self.send(from, target, meta(target), move |sim| handler(sim, target, responder));
        }
        Gather(state)
    }

    /// Drives tasks and events. With `until = Some(t)` only events scheduled
    /// strictly before `t` fire and the clock ends at `t`; with `None` the
    /// simulation runs until no events remain.
    pub fn run(&self, until: Option<SimTime>) {
        loop {
            self.poll_ready();
            let event = {
                let mut core = self.inner.core.borrow_mut();
                match core.queue.peek() {
                    None => break,
                    Some(next) if until.is_some_and(|u| next.at >= u) => break,
                    Some(_) => {}
                }
                let next = core.queue.pop().expect("peeked");
                core.now = next.at;
                core.fired += 1;
                next.event
            };
            event(self);
        }
        if let Some(u) = until {
            let mut core = self.inner.core.borrow_mut();
            core.now = core.now.max(u);
        }
    }

    fn poll_ready(&self) {
        loop {
            let spawned = std::mem::take(&mut self.inner.core.borrow_mut().spawned);
            for task in spawned {
                let id = self.inner.next_task.get();
                self.inner.next_task.set(id + 1);
                self.inner.tasks.borrow_mut().insert(id, task);
                self.inner.ready.lock().expect("ready queue lock").push_back(id);
            }
            let next = self.inner.ready.lock().expect("ready queue lock").pop_front();
            let Some(id) = next else {
                if self.inner.core.borrow().spawned.is_empty() {
                    return;
                }
                continue;
            };
            let Some(mut task) = self.inner.tasks.borrow_mut().remove(&id) else {
                continue;
            };
            let waker = Waker::from(Arc::new(TaskWaker { id, ready: Arc::clone(&self.inner.ready) }));
            let mut cx = Context::from_waker(&waker);
            if task.as_mut().poll(&mut cx).is_pending() {
                self.inner.tasks.borrow_mut().insert(id, task);
            }
        }
    }

    /// Number of tasks that have not finished.
    pub fn live_tasks(&self) -> usize {
        self.inner.tasks.borrow().len() + self.inner.core.borrow().spawned.len()
    }
}

struct SleepState {
    fired: bool,
    waker: Option<Waker>,
}

pub struct Sleep(Rc<RefCell<SleepState>>);

impl Future for Sleep {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut st = self.0.borrow_mut();
        if st.fired {
            Poll::Ready(())
        } else {
            st.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

pub struct TaskResult<T>(Rc<RefCell<Option<T>>>);

impl<T> TaskResult<T> {
    pub fn take(&self) -> Option<T> {
        self.0.borrow_mut().take()
    }
}

struct GatherState<R> {
    replies: Vec<(Endpoint, R)>,
    expected: usize,
    deadline: SimTime,
    done: bool,
    waker: Option<Waker>,
}

impl<R> GatherState<R> {
    fn finish(&mut self) {
        self.done = true;
        if let Some(w) = self.waker.take() {
            w.wake();
        }
    }
}

/// Replies collected for one round of requests, in arrival order.
pub struct Gather<R>(Rc<RefCell<GatherState<R>>>);

impl<R> Future for Gather<R> {
    type Output = Vec<(Endpoint, R)>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut st = self.0.borrow_mut();
        if st.done {
            Poll::Ready(std::mem::take(&mut st.replies))
        } else {
            st.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}

/// Reply channel handed to a request handler.
pub struct Responder<R> {
    state: Rc<RefCell<GatherState<R>>>,
    server: Endpoint,
    client: Endpoint,
}

impl<R: 'static> Responder<R> {
    pub fn server(&self) -> Endpoint {
        self.server
    }

    pub fn client(&self) -> Endpoint {
        self.client
    }

    /// Sends `value` back. It is counted only if it arrives before the deadline.
    pub fn reply<S: 'static>(self, sim: &Sim<S>, meta: MessageMeta, value: R) {
        let Responder { state, server, client } = self;
        sim.send(server, client, meta, move |sim| {
            let mut st = state.borrow_mut();
            if st.done || sim.now() >= st.deadline {
                return;
            }
            st.replies.push((server, value));
            if st.replies.len() == st.expected {
                st.finish();
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::MessageKind;

    fn meta() -> MessageMeta {
        MessageMeta::new(MessageKind::Read)
    }

    fn client() -> Endpoint {
        Endpoint::Client { id: 0, dc: 0 }
    }

    fn services(n: usize) -> Vec<Endpoint> {
        (0..n).map(|dc| Endpoint::Service { dc }).collect()
    }

    fn no_jitter(mut t: Topology) -> Topology {
        t.jitter = 0.0;
        t
    }

    #[test]
    fn delivery_takes_half_the_round_trip() {
        let sim = Sim::new(no_jitter(Topology::preset("OV").unwrap()), 1, Vec::<SimTime>::new());
        sim.send(client(), Endpoint::Service { dc: 1 }, meta(), |sim| {
            let now = sim.now();
            sim.with_state(|log| log.push(now));
        });
        sim.run(None);
        assert_eq!(sim.with_state(|log| log.clone()), vec![millis(45)]);
    }

    #[test]
    fn jittered_delivery_stays_within_bounds() {
        let sim = Sim::new(Topology::preset("OV").unwrap(), 7, Vec::<SimTime>::new());
        for _ in 0..200 {
            sim.send(client(), Endpoint::Service { dc: 1 }, meta(), |sim| {
                let now = sim.now();
                sim.with_state(|log| log.push(now));
            });
        }
        sim.run(None);
        let times = sim.with_state(|log| log.clone());
        assert_eq!(times.len(), 200);
        assert!(times.iter().all(|t| (millis_f(40.5)..=millis_f(49.5)).contains(t)));
    }

    #[test]
    fn total_loss_times_out_the_gather() {
        let mut topo = Topology::preset("VVV").unwrap();
        topo.loss = 0.999_999;
        let sim = Sim::new(topo, 3, ());
        let remote = &services(3)[1..];
        let gather = sim.request::<u32>(client(), remote, |_| meta(), |sim, _, r| r.reply(sim, meta(), 1));
        let result = sim.spawn_with_result(async move {
            let replies = gather.await;
            replies.len()
        });
        sim.run(None);
        assert_eq!(result.take(), Some(0));
        assert_eq!(sim.now(), millis(2000));
    }

    #[test]
    fn outage_drops_messages_to_the_service() {
        let mut topo = no_jitter(Topology::preset("replicas-5").unwrap());
        topo.outages.push(OutageWindow { datacenter: 3, from_ms: 0.0, to_ms: 10_000.0 });
        topo.outages.push(OutageWindow { datacenter: 4, from_ms: 0.0, to_ms: 10_000.0 });
        let sim = Sim::new(topo, 3, ());
        let gather =
            sim.request::<usize>(client(), &services(5), |_| meta(), |sim, to, r| r.reply(sim, meta(), to.dc()));
        let result = sim.spawn_with_result(gather);
        sim.run(None);
        let replies = result.take().unwrap();
        assert!(replies.len() <= 3);
        assert!(replies.iter().all(|(_, dc)| *dc < 3));
    }

    #[test]
    fn gather_returns_early_when_everyone_answered() {
        let sim = Sim::new(no_jitter(Topology::preset("VVV").unwrap()), 3, ());
        let gather =
            sim.request::<usize>(client(), &services(3), |_| meta(), |sim, to, r| r.reply(sim, meta(), to.dc()));
        let at = sim.spawn_with_result({
            let sim = sim.clone();
            async move {
                let replies = gather.await;
                (replies.len(), sim.now())
            }
        });
        sim.run(None);
        assert_eq!(at.take(), Some((3, millis_f(1.5))));
    }

    #[test]
    fn reply_landing_on_the_deadline_is_excluded() {
        let sim = Sim::new(no_jitter(Topology::preset("VVV").unwrap()), 3, ());
        let timeout = sim.timeout();
        let gather = sim.request::<usize>(
            client(),
            &services(2),
            |_| meta(),
            move |sim, to, r| {
                let dc = to.dc();
                // Local target answers right away; the remote one holds its reply
                // so that it arrives exactly at the deadline.
                let hold = if dc == 0 { 0 } else { timeout - 2 * millis_f(0.75) };
                let meta = meta();
                sim.schedule(hold, move |sim| r.reply(sim, meta, dc));
            },
        );
        let result = sim.spawn_with_result(gather);
        sim.run(None);
        let replies = result.take().unwrap();
        assert_eq!(replies.iter().map(|(_, dc)| *dc).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn run_until_zero_fires_nothing() {
        let sim = Sim::new(Topology::preset("VVV").unwrap(), 3, 0u32);
        sim.schedule(0, |sim| sim.with_state(|n| *n += 1));
        sim.run(Some(0));
        assert_eq!(sim.fired_events(), 0);
        assert_eq!(sim.with_state(|n| *n), 0);
        sim.run(None);
        assert_eq!(sim.with_state(|n| *n), 1);
    }

    #[test]
    fn ties_fire_in_insertion_order_and_clock_is_monotone() {
        let sim = Sim::new(Topology::preset("VVV").unwrap(), 3, Vec::<(SimTime, u32)>::new());
        for i in 0..5 {
            sim.schedule(millis(10), move |sim| {
                let now = sim.now();
                sim.with_state(|v| v.push((now, i)));
            });
        }
        sim.schedule(millis(5), |sim| {
            let now = sim.now();
            sim.with_state(|v| v.push((now, 99)));
        });
        sim.run(None);
        let order = sim.with_state(|v| v.clone());
        assert_eq!(order.iter().map(|(_, i)| *i).collect::<Vec<_>>(), vec![99, 0, 1, 2, 3, 4]);
        assert!(order.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn same_seed_same_traffic() {
        let run = |seed| {
            let mut topo = Topology::preset("COV").unwrap();
            topo.loss = 0.3;
            let sim = Sim::new(topo, seed, ());
            for _ in 0..50 {
                let g = sim.request::<()>(client(), &services(3), |_| meta(), |sim, _, r| r.reply(sim, meta(), ()));
                sim.spawn(async move {
                    g.await;
                });
            }
            sim.run(None);
            serde_json::to_string(&sim.traffic()).unwrap()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn tasks_sleep_on_the_simulated_clock() {
        let sim = Sim::new(Topology::preset("VV").unwrap(), 0, Vec::<SimTime>::new());
        for d in [30, 10, 20] {
            let s = sim.clone();
            sim.spawn(async move {
                s.sleep(millis(d)).await;
                let now = s.now();
                s.with_state(|v| v.push(now));
            });
        }
        sim.run(None);
        assert_eq!(sim.with_state(|v| v.clone()), vec![millis(10), millis(20), millis(30)]);
        assert_eq!(sim.live_tasks(), 0);
    }
}
