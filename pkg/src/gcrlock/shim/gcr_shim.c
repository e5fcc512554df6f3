/*
 * Preloadable pthread mutex wrapper that routes lock/unlock of plain
 * (PTHREAD_MUTEX_NORMAL/DEFAULT, process-private) mutexes through
 * concurrency restriction.  Everything else is forwarded untouched.
 *
 *   LD_PRELOAD=/path/to/libgcrshim.so ./program
 *
 * Knobs (environment, read once at load):
 *   GCR_PASSIVE_THRESHOLD   active threads before newcomers queue (4)
 *   GCR_FAIRNESS_THRESHOLD  acquisitions per forced admission (0x4000)
 *   GCR_ENABLE_COUNT        waiters that switch restriction on (4)
 *   GCR_BACKOFF_CAP         ceiling of the head's polling interval (1<<20)
 *   GCR_ADAPTIVE            0 keeps restriction on permanently (1)
 *   GCR_SPIN_BUDGET         spins before a passive thread parks (1000)
 *   GCR_NUMA_EPOCH          accepted for symmetry; the shim is not NUMA-aware
 *
 * trylock and timedlock are forwarded.  A thread that waits on a condition
 * variable gives back its counted hold first; the mutex it gets back from
 * the wait is uncounted, so that cycle bypasses restriction.
 */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <linux/futex.h>
#include <pthread.h>
#include <sched.h>
#include <stdatomic.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

#define EXPORT __attribute__((visibility("default")))

#define SHARDS 256
#define TABLE_SLOTS 1024
#define SCAN_CAP 1024
#define MAX_HELD 64

enum { EV_UNSET = 0, EV_SET = 1, EV_PARKED = 2 };

struct qnode {
    _Atomic(struct qnode *) next;
    _Atomic int event;
};

struct gcr {
    pthread_mutex_t *key;
    struct gcr *chain;
    _Atomic(struct qnode *) top;
    _Atomic(struct qnode *) tail;
    _Atomic int top_approved;
    _Atomic uint64_t ingress;
    _Atomic uint64_t egress;
    _Atomic uint64_t num_acqs;
    _Atomic uint64_t next_check_active;
    _Atomic int enabled;
};

struct shard {
    atomic_flag busy;
    struct gcr *head;
};

struct held {
    pthread_mutex_t *m;
    struct gcr *g;
    int counted;
};

static struct {
    long passive;
    long fairness;
    long enable_count;
    long backoff_cap;
    long spin_budget;
    int adaptive;
} cfg = {4, 0x4000, 4, 1L << 20, 1000, 1};

static int (*real_init)(pthread_mutex_t *, const pthread_mutexattr_t *);
static int (*real_lock)(pthread_mutex_t *);
static int (*real_trylock)(pthread_mutex_t *);
static int (*real_unlock)(pthread_mutex_t *);
static int (*real_destroy)(pthread_mutex_t *);
static int (*real_cond_wait)(pthread_cond_t *, pthread_mutex_t *);
static int (*real_cond_timedwait)(pthread_cond_t *, pthread_mutex_t *, const struct timespec *);

static struct shard shards[SHARDS];
static _Atomic long registry_size;
static _Atomic uint64_t stat_slow, stat_signals, stat_enables, stat_disables;

static _Atomic(struct gcr *) table[TABLE_SLOTS];
static _Atomic int table_used[TABLE_SLOTS];
static pthread_key_t slot_key;

static __thread struct qnode t_node;
static __thread struct held t_held[MAX_HELD];
static __thread int t_nheld;
static __thread int t_inside;
static __thread int t_slot = -2;  /* -2 unregistered, -1 table full */
static __thread long t_period = 1, t_countdown = 1;

/* ---- plumbing ----------------------------------------------------------- */

static void *next_sym(const char *name, const char *version)
{
    void *p = version ? dlvsym(RTLD_NEXT, name, version) : NULL;
    return p ? p : dlsym(RTLD_NEXT, name);
}

static long env_long(const char *name, long fallback)
{
    const char *raw = getenv(name);
    if (!raw || !*raw)
        return fallback;
    char *end;
    long v = strtol(raw, &end, 0);
    return (*end == '\0') ? v : fallback;
}

static void release_slot(void *arg)
{
    long slot = (long)(intptr_t)arg - 1;
    if (slot >= 0) {
        atomic_store(&table[slot], NULL);
        atomic_store(&table_used[slot], 0);
    }
}

static void shim_setup(void)
{
    real_init = next_sym("pthread_mutex_init", NULL);
    real_lock = next_sym("pthread_mutex_lock", NULL);
    real_trylock = next_sym("pthread_mutex_trylock", NULL);
    real_unlock = next_sym("pthread_mutex_unlock", NULL);
    real_destroy = next_sym("pthread_mutex_destroy", NULL);
    /* The unversioned lookup can land on the pre-2.3.2 compat symbol. */
    real_cond_wait = next_sym("pthread_cond_wait", "GLIBC_2.3.2");
    real_cond_timedwait = next_sym("pthread_cond_timedwait", "GLIBC_2.3.2");

    cfg.passive = env_long("GCR_PASSIVE_THRESHOLD", cfg.passive);
    cfg.fairness = env_long("GCR_FAIRNESS_THRESHOLD", cfg.fairness);
    cfg.enable_count = env_long("GCR_ENABLE_COUNT", cfg.enable_count);
    cfg.backoff_cap = env_long("GCR_BACKOFF_CAP", cfg.backoff_cap);
    cfg.spin_budget = env_long("GCR_SPIN_BUDGET", cfg.spin_budget);
    cfg.adaptive = env_long("GCR_ADAPTIVE", cfg.adaptive) != 0;
    if (cfg.passive < 1)
        cfg.passive = 1;
    if (cfg.fairness < 1)
        cfg.fairness = 1;
    if (cfg.backoff_cap < 1)
        cfg.backoff_cap = 1;
    if (cfg.spin_budget < 0)
        cfg.spin_budget = 0;
    pthread_key_create(&slot_key, release_slot);
}

static pthread_once_t setup_once = PTHREAD_ONCE_INIT;

/* Runs at load; the lazy calls cover other libraries' constructors. */
__attribute__((constructor)) static void shim_init(void)
{
    pthread_once(&setup_once, shim_setup);
}

static inline void cpu_relax(unsigned long i)
{
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#elif defined(__aarch64__)
    __asm__ __volatile__("yield");
#endif
    /* Give the CPU away now and then so an oversubscribed spinner cannot
       burn its whole time slice while the holder is descheduled. */
    if ((i & 255) == 255)
        sched_yield();
}

static int plain_mutex(pthread_mutex_t *m)
{
#ifdef __GLIBC__
    /* Low bits: type (0 normal), 16 robust, 32/64 priority protocols, 128 pshared. */
    return (m->__data.__kind & 0xff) == PTHREAD_MUTEX_NORMAL;
#else
    (void)m;
    return 1;
#endif
}

/* ---- wait flag ---------------------------------------------------------- */

static void futex_wait(_Atomic int *addr, int val)
{
    syscall(SYS_futex, (int *)addr, FUTEX_WAIT_PRIVATE, val, NULL, NULL, 0);
}

static void futex_wake(_Atomic int *addr)
{
    syscall(SYS_futex, (int *)addr, FUTEX_WAKE_PRIVATE, 1, NULL, NULL, 0);
}

static void flag_wait(_Atomic int *ev)
{
    for (long i = 0; i < cfg.spin_budget; i++) {
        if (atomic_load(ev) == EV_SET)
            return;
        cpu_relax(i);
    }
    int expect = EV_UNSET;
    if (!atomic_compare_exchange_strong(ev, &expect, EV_PARKED) && expect == EV_SET)
        return;
    while (atomic_load(ev) != EV_SET)
        futex_wait(ev, EV_PARKED);
}

static void flag_set_and_wake(_Atomic int *ev)
{
    if (atomic_exchange(ev, EV_SET) == EV_PARKED)
        futex_wake(ev);
}

/* ---- registry ----------------------------------------------------------- */

static inline struct shard *shard_of(pthread_mutex_t *m)
{
    uintptr_t h = (uintptr_t)m;
    h ^= h >> 17;
    h *= 0x9E3779B97F4A7C15ull;
    return &shards[(h >> 32) % SHARDS];
}

static inline void shard_lock(struct shard *s)
{
    unsigned long i = 0;
    while (atomic_flag_test_and_set_explicit(&s->busy, memory_order_acquire))
        cpu_relax(i++);
}

static inline void shard_unlock(struct shard *s)
{
    atomic_flag_clear_explicit(&s->busy, memory_order_release);
}

static struct gcr *registry_get(pthread_mutex_t *m)
{
    struct shard *s = shard_of(m);
    shard_lock(s);
    struct gcr *g = s->head;
    while (g && g->key != m)
        g = g->chain;
    if (!g) {
        g = calloc(1, sizeof *g);
        if (g) {
            g->key = m;
            g->next_check_active = 1;
            g->enabled = !cfg.adaptive;
            g->chain = s->head;
            s->head = g;
            atomic_fetch_add(&registry_size, 1);
        }
    }
    shard_unlock(s);
    return g;
}

static void registry_drop(pthread_mutex_t *m)
{
    struct shard *s = shard_of(m);
    shard_lock(s);
    struct gcr **link = &s->head;
    while (*link && (*link)->key != m)
        link = &(*link)->chain;
    struct gcr *g = *link;
    if (g) {
        *link = g->chain;
        atomic_fetch_sub(&registry_size, 1);
    }
    shard_unlock(s);
    t_inside = 1;
    free(g);
    t_inside = 0;
}

/* ---- contention table --------------------------------------------------- */

static int my_slot(void)
{
    if (t_slot != -2)
        return t_slot;
    t_slot = -1;
    for (int i = 0; i < TABLE_SLOTS; i++) {
        int expect = 0;
        if (atomic_compare_exchange_strong(&table_used[i], &expect, 1)) {
            t_slot = i;
            pthread_setspecific(slot_key, (void *)(intptr_t)(i + 1));
            break;
        }
    }
    return t_slot;
}

static int scan_due(void)
{
    if (--t_countdown > 0)
        return 0;
    if (t_period < SCAN_CAP)
        t_period *= 2;
    t_countdown = t_period;
    return 1;
}

static void maybe_enable(struct gcr *g)
{
    long n = 0;
    for (int i = 0; i < TABLE_SLOTS; i++)
        if (atomic_load_explicit(&table[i], memory_order_relaxed) == g)
            n++;
    if (n >= cfg.enable_count && !atomic_exchange(&g->enabled, 1))
        atomic_fetch_add(&stat_enables, 1);
}

/* ---- restriction -------------------------------------------------------- */

static inline long active_estimate(struct gcr *g)
{
    uint64_t in = atomic_load(&g->ingress);
    uint64_t out = atomic_load(&g->egress);
    return in > out ? (long)(in - out) : 0;
}

static void queue_push(struct gcr *g, struct qnode *n)
{
    atomic_store(&n->next, NULL);
    atomic_store(&n->event, EV_UNSET);
    struct qnode *prv = atomic_exchange(&g->tail, n);
    if (prv) {
        atomic_store(&prv->next, n);
    } else {
        atomic_store(&g->top, n);
        atomic_store(&n->event, EV_SET);
    }
}

static void queue_pop(struct gcr *g, struct qnode *n)
{
    struct qnode *succ = atomic_load(&n->next);
    if (!succ) {
        struct qnode *expect = n;
        if (atomic_compare_exchange_strong(&g->tail, &expect, NULL)) {
            expect = n;
            atomic_compare_exchange_strong(&g->top, &expect, NULL);
            return;
        }
        unsigned long i = 0;
        while (!(succ = atomic_load(&n->next)))
            cpu_relax(i++);
    }
    atomic_store(&g->top, succ);
    flag_set_and_wake(&succ->event);
}

static void admission_wait(struct gcr *g)
{
    uint64_t cnt = 0;
    while (!atomic_load(&g->top_approved)) {
        cpu_relax(cnt);
        cnt++;
        uint64_t every = atomic_load_explicit(&g->next_check_active, memory_order_relaxed);
        if (cnt % every == 0) {
            if (active_estimate(g) <= 2) {
                atomic_store(&g->next_check_active, 1);
                break;
            }
            if (every < (uint64_t)cfg.backoff_cap)
                atomic_store(&g->next_check_active, every * 2);
        }
    }
    if (atomic_load(&g->top_approved))
        atomic_store(&g->top_approved, 0);
    atomic_fetch_add(&g->ingress, 1);
}

static void gcr_enter(struct gcr *g)
{
    if (active_estimate(g) < cfg.passive) {
        atomic_fetch_add(&g->ingress, 1);
        return;
    }
    atomic_fetch_add(&stat_slow, 1);
    struct qnode *n = &t_node;
    queue_push(g, n);
    if (atomic_load(&n->event) != EV_SET)
        flag_wait(&n->event);
    admission_wait(g);
    queue_pop(g, n);
}

/* Release-side bookkeeping, run while the mutex is still held. */
static void gcr_leave(struct gcr *g, int counted)
{
    uint64_t acqs = atomic_load_explicit(&g->num_acqs, memory_order_relaxed) + 1;
    atomic_store(&g->num_acqs, acqs);
    if (acqs % (uint64_t)cfg.fairness == 0) {
        if (atomic_load(&g->top)) {
            atomic_store(&g->top_approved, 1);
            atomic_fetch_add(&stat_signals, 1);
        } else if (cfg.adaptive && atomic_load(&g->enabled) && active_estimate(g) <= 2) {
            atomic_store(&g->enabled, 0);
            atomic_fetch_add(&stat_disables, 1);
        }
    }
    if (counted)
        atomic_fetch_add(&g->egress, 1);
}

static void after_release(struct gcr *g)
{
    if (!cfg.adaptive || t_slot < 0)
        return;
    atomic_store(&table[t_slot], NULL);
    if (scan_due())
        maybe_enable(g);
}

static int held_index(pthread_mutex_t *m)
{
    for (int i = t_nheld - 1; i >= 0; i--)
        if (t_held[i].m == m)
            return i;
    return -1;
}

static void held_remove(int i)
{
    t_held[i] = t_held[--t_nheld];
}

/* ---- exported symbols --------------------------------------------------- */

EXPORT int pthread_mutex_init(pthread_mutex_t *m, const pthread_mutexattr_t *attr)
{
    if (!real_init)
        shim_init();
    /* A re-initialised address starts with fresh state. */
    registry_drop(m);
    return real_init(m, attr);
}

EXPORT int pthread_mutex_destroy(pthread_mutex_t *m)
{
    if (!real_destroy)
        shim_init();
    int rc = real_destroy(m);
    if (rc == 0)
        registry_drop(m);
    return rc;
}

EXPORT int pthread_mutex_trylock(pthread_mutex_t *m)
{
    if (!real_trylock)
        shim_init();
    return real_trylock(m);
}

EXPORT int pthread_mutex_lock(pthread_mutex_t *m)
{
    if (!real_lock)
        shim_init();
    if (t_inside || t_nheld == MAX_HELD || !plain_mutex(m) || held_index(m) >= 0)
        return real_lock(m);
    t_inside = 1;
    struct gcr *g = registry_get(m);
    if (!g) {
        t_inside = 0;
        return real_lock(m);
    }
    int restrict_ = 1;
    if (cfg.adaptive) {
        int slot = my_slot();
        if (slot >= 0) {
            atomic_store(&table[slot], g);
            restrict_ = atomic_load(&g->enabled);
        }
    }
    if (restrict_)
        gcr_enter(g);
    t_inside = 0;
    int rc = real_lock(m);
    if (rc != 0) {
        /* Keep ingress/egress balanced when the platform refuses the lock. */
        if (restrict_)
            atomic_fetch_add(&g->egress, 1);
        if (cfg.adaptive && t_slot >= 0)
            atomic_store(&table[t_slot], NULL);
        return rc;
    }
    t_held[t_nheld++] = (struct held){m, g, restrict_};
    return 0;
}

EXPORT int pthread_mutex_unlock(pthread_mutex_t *m)
{
    if (!real_unlock)
        shim_init();
    int i = t_inside ? -1 : held_index(m);
    if (i < 0)
        return real_unlock(m);
    struct held h = t_held[i];
    held_remove(i);
    gcr_leave(h.g, h.counted);
    int rc = real_unlock(m);
    after_release(h.g);
    return rc;
}

static void give_back_for_wait(pthread_mutex_t *m)
{
    int i = held_index(m);
    if (i < 0)
        return;
    struct held h = t_held[i];
    held_remove(i);
    gcr_leave(h.g, h.counted);
    if (cfg.adaptive && t_slot >= 0)
        atomic_store(&table[t_slot], NULL);
}

EXPORT int pthread_cond_wait(pthread_cond_t *c, pthread_mutex_t *m)
{
    if (!real_cond_wait)
        shim_init();
    give_back_for_wait(m);
    return real_cond_wait(c, m);
}

EXPORT int pthread_cond_timedwait(pthread_cond_t *c, pthread_mutex_t *m, const struct timespec *ts)
{
    if (!real_cond_timedwait)
        shim_init();
    give_back_for_wait(m);
    return real_cond_timedwait(c, m, ts);
}

/* ---- probes ------------------------------------------------------------- */

EXPORT long gcr_shim_registry_size(void)
{
    return atomic_load(&registry_size);
}

/* slow-path entries, fairness signals, enables, disables */
EXPORT void gcr_shim_stats(uint64_t out[4])
{
    out[0] = atomic_load(&stat_slow);
    out[1] = atomic_load(&stat_signals);
    out[2] = atomic_load(&stat_enables);
    out[3] = atomic_load(&stat_disables);
}
