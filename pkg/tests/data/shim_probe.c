/* Test program for the preload shim.
 *
 *   shim_probe single               deterministic single-threaded run
 *   shim_probe contend T N          T threads x N critical sections
 *   shim_probe cycles N             N lock/unlock cycles on one mutex
 *   shim_probe firstuse T           T threads race to lock a fresh mutex
 *   shim_probe condvar N            producer/consumer over a condition variable
 *
 * Lines starting with "shim:" only appear when the shim is loaded.
 */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <pthread.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

static void shim_report(void)
{
    long (*size)(void) = (long (*)(void))dlsym(RTLD_DEFAULT, "gcr_shim_registry_size");
    void (*stats)(uint64_t *) = (void (*)(uint64_t *))dlsym(RTLD_DEFAULT, "gcr_shim_stats");
    if (size)
        printf("shim: registry=%ld\n", size());
    if (stats) {
        uint64_t s[4];
        stats(s);
        printf("shim: slow=%llu signals=%llu enables=%llu disables=%llu\n",
               (unsigned long long)s[0], (unsigned long long)s[1],
               (unsigned long long)s[2], (unsigned long long)s[3]);
    }
}

static int single(void)
{
    pthread_mutex_t a = PTHREAD_MUTEX_INITIALIZER;
    pthread_mutex_t b;
    pthread_mutexattr_t attr;
    int rc;

    printf("lock=%d\n", pthread_mutex_lock(&a));
    printf("trylock_held=%d\n", pthread_mutex_trylock(&a) == EBUSY);
    printf("unlock=%d\n", pthread_mutex_unlock(&a));
    printf("trylock_free=%d\n", pthread_mutex_trylock(&a));
    printf("unlock=%d\n", pthread_mutex_unlock(&a));

    pthread_mutexattr_init(&attr);
    pthread_mutexattr_settype(&attr, PTHREAD_MUTEX_ERRORCHECK);
    printf("init_errorcheck=%d\n", pthread_mutex_init(&b, &attr));
    rc = pthread_mutex_unlock(&b);
    printf("unlock_unowned=%s\n", rc == EPERM ? "EPERM" : rc == 0 ? "0" : "other");
    printf("lock=%d\n", pthread_mutex_lock(&b));
    rc = pthread_mutex_lock(&b);
    printf("relock=%s\n", rc == EDEADLK ? "EDEADLK" : "other");
    printf("unlock=%d\n", pthread_mutex_unlock(&b));
    printf("destroy=%d\n", pthread_mutex_destroy(&b));

    pthread_mutexattr_settype(&attr, PTHREAD_MUTEX_RECURSIVE);
    pthread_mutex_init(&b, &attr);
    printf("recursive=%d%d%d%d\n", pthread_mutex_lock(&b), pthread_mutex_lock(&b),
           pthread_mutex_unlock(&b), pthread_mutex_unlock(&b));
    pthread_mutex_destroy(&b);
    pthread_mutexattr_destroy(&attr);

    pthread_cond_t c = PTHREAD_COND_INITIALIZER;
    struct timespec ts;
    clock_gettime(CLOCK_REALTIME, &ts);
    ts.tv_nsec += 1000000;
    if (ts.tv_nsec >= 1000000000) {
        ts.tv_sec += 1;
        ts.tv_nsec -= 1000000000;
    }
    pthread_mutex_lock(&a);
    rc = pthread_cond_timedwait(&c, &a, &ts);
    printf("timedwait=%s\n", rc == ETIMEDOUT ? "ETIMEDOUT" : "other");
    printf("unlock=%d\n", pthread_mutex_unlock(&a));

    long sum = 0;
    for (int i = 0; i < 1000; i++) {
        pthread_mutex_lock(&a);
        sum += i;
        pthread_mutex_unlock(&a);
    }
    printf("sum=%ld\n", sum);
    return 0;
}

static pthread_mutex_t shared = PTHREAD_MUTEX_INITIALIZER;
static volatile long inside, counter, violations;
static long iters;

static void *hammer(void *arg)
{
    long *mine = arg;
    for (long i = 0; i < iters; i++) {
        pthread_mutex_lock(&shared);
        if (++inside != 1)
            violations++;
        counter++;
        (*mine)++;
        inside--;
        pthread_mutex_unlock(&shared);
    }
    return NULL;
}

static int contend(int t, long n)
{
    pthread_t th[t];
    long counts[t];
    iters = n;
    for (int i = 0; i < t; i++) {
        counts[i] = 0;
        pthread_create(&th[i], NULL, hammer, &counts[i]);
    }
    int starved = 0;
    for (int i = 0; i < t; i++) {
        pthread_join(th[i], NULL);
        starved += counts[i] != n;
    }
    printf("total=%ld expected=%ld violations=%ld short=%d\n", counter, (long)t * n, violations, starved);
    return violations != 0 || counter != (long)t * n;
}

static int cycles(long n)
{
    pthread_mutex_t m;
    pthread_mutex_init(&m, NULL);
    for (long i = 0; i < n; i++) {
        pthread_mutex_lock(&m);
        pthread_mutex_unlock(&m);
    }
    printf("cycles=%ld\n", n);
    shim_report();
    pthread_mutex_destroy(&m);
    shim_report();
    return 0;
}

static pthread_mutex_t fresh = PTHREAD_MUTEX_INITIALIZER;
static pthread_barrier_t gate;

static void *first_touch(void *arg)
{
    (void)arg;
    pthread_barrier_wait(&gate);
    pthread_mutex_lock(&fresh);
    counter++;
    pthread_mutex_unlock(&fresh);
    return NULL;
}

static int firstuse(int t)
{
    pthread_t th[t];
    pthread_barrier_init(&gate, NULL, t);
    for (int i = 0; i < t; i++)
        pthread_create(&th[i], NULL, first_touch, NULL);
    for (int i = 0; i < t; i++)
        pthread_join(th[i], NULL);
    printf("touched=%ld\n", counter);
    shim_report();
    return 0;
}

static pthread_mutex_t qlock = PTHREAD_MUTEX_INITIALIZER;
static pthread_cond_t qcond = PTHREAD_COND_INITIALIZER;
static long slot_value, slot_full, consumed;

static void *consumer(void *arg)
{
    long n = *(long *)arg;
    for (long i = 0; i < n; i++) {
        pthread_mutex_lock(&qlock);
        while (!slot_full)
            pthread_cond_wait(&qcond, &qlock);
        consumed += slot_value;
        slot_full = 0;
        pthread_cond_broadcast(&qcond);
        pthread_mutex_unlock(&qlock);
    }
    return NULL;
}

static int condvar(long n)
{
    pthread_t th;
    pthread_create(&th, NULL, consumer, &n);
    for (long i = 1; i <= n; i++) {
        pthread_mutex_lock(&qlock);
        while (slot_full)
            pthread_cond_wait(&qcond, &qlock);
        slot_value = i;
        slot_full = 1;
        pthread_cond_broadcast(&qcond);
        pthread_mutex_unlock(&qlock);
    }
    pthread_join(th, NULL);
    printf("consumed=%ld expected=%ld\n", consumed, n * (n + 1) / 2);
    return consumed != n * (n + 1) / 2;
}

int main(int argc, char **argv)
{
    setvbuf(stdout, NULL, _IOLBF, 0);
    if (argc < 2) {
        fprintf(stderr, "usage: %s single|contend T N|cycles N|firstuse T|condvar N\n", argv[0]);
        return 2;
    }
    const char *mode = argv[1];
    if (!strcmp(mode, "single"))
        return single();
    if (!strcmp(mode, "contend") && argc == 4) {
        int rc = contend(atoi(argv[2]), atol(argv[3]));
        shim_report();
        return rc;
    }
    if (!strcmp(mode, "cycles") && argc == 3)
        return cycles(atol(argv[2]));
    if (!strcmp(mode, "firstuse") && argc == 3)
        return firstuse(atoi(argv[2]));
    if (!strcmp(mode, "condvar") && argc == 3) {
        int rc = condvar(atol(argv[2]));
        shim_report();
        return rc;
    }
    fprintf(stderr, "bad arguments\n");
    return 2;
}
