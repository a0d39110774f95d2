/* A small sensor-beacon application used as a compiled, stripped sample.
 * Built freestanding so the string and memory routines are ours. */

#include <stdint.h>
#include <stddef.h>

#define NOINLINE __attribute__((noinline))
#define SVC(n) __attribute__((naked, noinline))

typedef struct {
    uint8_t buf[64];
    uint16_t head, tail;
} ring_t;

typedef struct {
    uint16_t uuid;
    uint16_t handle;
    uint8_t props;
    uint8_t len;
    uint8_t value[20];
} attr_t;

typedef struct {
    uint32_t sum;
    int32_t min, max;
    uint32_t count;
} stats_t;

typedef void (*handler_t)(uint32_t);

volatile uint32_t *const UART_TX = (uint32_t *)0x40002000;
volatile uint32_t *const UART_RX = (uint32_t *)0x40002004;
volatile uint32_t *const TIMER_CC = (uint32_t *)0x40008540;
volatile uint32_t *const RADIO_STATE = (uint32_t *)0x40001550;

uint8_t device_name[16] = "thermo-beacon";
uint32_t adv_interval = 160;
static ring_t rx_ring;
static ring_t tx_ring;
static attr_t attrs[8];
static stats_t temp_stats;
static uint32_t tick_count;
static uint32_t event_log[32];
static uint8_t log_pos;
static uint8_t scratch[128];
static uint16_t service_handle;
static uint8_t state;

/* Memory and string routines. */

NOINLINE void *memset(void *dst, int c, size_t n)
{
    uint8_t *d = dst;
    while (n--)
        *d++ = (uint8_t)c;
    return dst;
}

NOINLINE void *memcpy(void *dst, const void *src, size_t n)
{
    uint8_t *d = dst;
    const uint8_t *s = src;
    while (n--)
        *d++ = *s++;
    return dst;
}

NOINLINE void *memmove(void *dst, const void *src, size_t n)
{
    uint8_t *d = dst;
    const uint8_t *s = src;
    if (d < s) {
        while (n--)
            *d++ = *s++;
    } else {
        d += n;
        s += n;
        while (n--)
            *--d = *--s;
    }
    return dst;
}

NOINLINE int memcmp(const void *a, const void *b, size_t n)
{
    const uint8_t *x = a, *y = b;
    for (; n; n--, x++, y++)
        if (*x != *y)
            return *x - *y;
    return 0;
}

NOINLINE size_t strlen(const char *s)
{
    const char *p = s;
    while (*p)
        p++;
    return (size_t)(p - s);
}

NOINLINE char *strncpy(char *dst, const char *src, size_t n)
{
    size_t i = 0;
    for (; i < n && src[i]; i++)
        dst[i] = src[i];
    for (; i < n; i++)
        dst[i] = 0;
    return dst;
}

NOINLINE int strcmp(const char *a, const char *b)
{
    while (*a && *a == *b) {
        a++;
        b++;
    }
    return (uint8_t)*a - (uint8_t)*b;
}

/* Leaf helpers that look a little like memset from the outside. */

NOINLINE void fill_words(uint32_t *dst, uint32_t v, size_t n)
{
    for (size_t i = 0; i < n; i++)
        dst[i] = v;
}

NOINLINE void fill_halfwords(uint16_t *dst, uint16_t v, size_t n)
{
    for (size_t i = 0; i < n; i++)
        dst[i] = v;
}

NOINLINE void fill_ramp(uint8_t *dst, uint8_t start, size_t n)
{
    for (size_t i = 0; i < n; i++)
        dst[i] = (uint8_t)(start + i);
}

NOINLINE void xor_buf(uint8_t *dst, uint8_t key, size_t n)
{
    for (size_t i = 0; i < n; i++)
        dst[i] ^= key;
}

NOINLINE void bzero_even(uint8_t *dst, uint8_t unused, size_t n)
{
    (void)unused;
    for (size_t i = 0; i < n; i += 2)
        dst[i] = 0;
}

NOINLINE void reverse_bytes(uint8_t *buf, size_t n)
{
    for (size_t i = 0, j = n ? n - 1 : 0; i < j; i++, j--) {
        uint8_t t = buf[i];
        buf[i] = buf[j];
        buf[j] = t;
    }
}

NOINLINE void to_upper(char *s)
{
    for (; *s; s++)
        if (*s >= 'a' && *s <= 'z')
            *s -= 32;
}

NOINLINE void fill_until(uint8_t *dst, uint8_t c, size_t n)
{
    for (size_t i = 0; i < n && dst[i] != c; i++)
        dst[i] = c;
}

NOINLINE uint8_t checksum8(const uint8_t *p, size_t n)
{
    uint8_t s = 0;
    while (n--)
        s += *p++;
    return s;
}

NOINLINE uint16_t crc16_ccitt(const uint8_t *p, size_t n)
{
    uint16_t crc = 0xffff;
    while (n--) {
        crc ^= (uint16_t)(*p++) << 8;
        for (int i = 0; i < 8; i++)
            crc = (crc & 0x8000) ? (uint16_t)((crc << 1) ^ 0x1021) : (uint16_t)(crc << 1);
    }
    return crc;
}

NOINLINE uint32_t crc32(const uint8_t *p, size_t n)
{
    uint32_t crc = 0xffffffff;
    while (n--) {
        crc ^= *p++;
        for (int i = 0; i < 8; i++)
            crc = (crc >> 1) ^ (0xedb88320 & -(crc & 1));
    }
    return ~crc;
}

NOINLINE uint32_t popcount32(uint32_t v)
{
    uint32_t c = 0;
    while (v) {
        v &= v - 1;
        c++;
    }
    return c;
}

NOINLINE int32_t clamp(int32_t v, int32_t lo, int32_t hi)
{
    return v < lo ? lo : v > hi ? hi : v;
}

NOINLINE uint32_t isqrt(uint32_t x)
{
    uint32_t r = 0, bit = 1u << 30;
    while (bit > x)
        bit >>= 2;
    while (bit) {
        if (x >= r + bit) {
            x -= r + bit;
            r = (r >> 1) + bit;
        } else {
            r >>= 1;
        }
        bit >>= 2;
    }
    return r;
}

NOINLINE uint32_t udiv_slow(uint32_t n, uint32_t d)
{
    uint32_t q = 0, r = 0;
    if (!d)
        return 0;
    for (int i = 31; i >= 0; i--) {
        r = (r << 1) | ((n >> i) & 1);
        if (r >= d) {
            r -= d;
            q |= 1u << i;
        }
    }
    return q;
}

NOINLINE int32_t scale_temp(int32_t raw)
{
    return (int32_t)udiv_slow((uint32_t)(raw * 625 + 50000), 100) - 500;
}

/* Ring buffers. */

NOINLINE void ring_init(ring_t *r)
{
    memset(r->buf, 0, sizeof r->buf);
    r->head = r->tail = 0;
}

NOINLINE int ring_put(ring_t *r, uint8_t b)
{
    uint16_t next = (uint16_t)((r->head + 1) & 63);
    if (next == r->tail)
        return -1;
    r->buf[r->head] = b;
    r->head = next;
    return 0;
}

NOINLINE int ring_get(ring_t *r)
{
    if (r->head == r->tail)
        return -1;
    uint8_t b = r->buf[r->tail];
    r->tail = (uint16_t)((r->tail + 1) & 63);
    return b;
}

NOINLINE size_t ring_count(const ring_t *r)
{
    return (size_t)((r->head - r->tail) & 63);
}

/* UART output. */

NOINLINE void uart_putc(char c)
{
    if (ring_put(&tx_ring, (uint8_t)c) < 0)
        *UART_TX = (uint8_t)c;
}

NOINLINE void uart_puts(const char *s)
{
    while (*s)
        uart_putc(*s++);
}

NOINLINE void uart_put_hex(uint32_t v, int digits)
{
    static const char hex[] = "0123456789abcdef";
    while (digits--)
        uart_putc(hex[(v >> (4 * digits)) & 15]);
}

NOINLINE char *utoa10(uint32_t v, char *out)
{
    char tmp[11];
    int n = 0;
    do {
        uint32_t q = udiv_slow(v, 10);
        tmp[n++] = (char)('0' + (v - q * 10));
        v = q;
    } while (v);
    for (int i = 0; i < n; i++)
        out[i] = tmp[n - 1 - i];
    out[n] = 0;
    return out;
}

NOINLINE void uart_put_dec(int32_t v)
{
    char buf[12];
    if (v < 0) {
        uart_putc('-');
        v = -v;
    }
    uart_puts(utoa10((uint32_t)v, buf));
}

NOINLINE int parse_hex_digit(char c)
{
    switch (c) {
    case '0': case '1': case '2': case '3': case '4':
    case '5': case '6': case '7': case '8': case '9':
        return c - '0';
    case 'a': case 'b': case 'c': case 'd': case 'e': case 'f':
        return c - 'a' + 10;
    case 'A': case 'B': case 'C': case 'D': case 'E': case 'F':
        return c - 'A' + 10;
    default:
        return -1;
    }
}

NOINLINE uint32_t parse_hex(const char *s)
{
    uint32_t v = 0;
    int d;
    while ((d = parse_hex_digit(*s++)) >= 0)
        v = (v << 4) | (uint32_t)d;
    return v;
}

/* Statistics. */

NOINLINE void stats_reset(stats_t *s)
{
    s->sum = 0;
    s->count = 0;
    s->min = 0x7fffffff;
    s->max = -0x7fffffff - 1;
}

NOINLINE void stats_add(stats_t *s, int32_t v)
{
    s->sum += (uint32_t)v;
    s->count++;
    if (v < s->min)
        s->min = v;
    if (v > s->max)
        s->max = v;
}

NOINLINE int32_t stats_mean(const stats_t *s)
{
    if (!s->count)
        return 0;
    return (int32_t)udiv_slow(s->sum, s->count);
}

NOINLINE void insertion_sort(int32_t *a, size_t n)
{
    for (size_t i = 1; i < n; i++) {
        int32_t v = a[i];
        size_t j = i;
        while (j && a[j - 1] > v) {
            a[j] = a[j - 1];
            j--;
        }
        a[j] = v;
    }
}

NOINLINE int32_t median5(const int32_t *in)
{
    int32_t tmp[5];
    memcpy(tmp, in, sizeof tmp);
    insertion_sort(tmp, 5);
    return tmp[2];
}

/* Supervisor calls into the radio stack. */

SVC(0x60) uint32_t sd_ble_enable(void *p) { __asm volatile("svc #0x60\n bx lr"); }
SVC(0xa8) uint32_t sd_ble_gatts_service_add(uint8_t type, const void *uuid, uint16_t *handle) { __asm volatile("svc #0xa8\n bx lr"); }
SVC(0xaa) uint32_t sd_ble_gatts_characteristic_add(uint16_t service, const void *md, const void *attr, void *handles) { __asm volatile("svc #0xaa\n bx lr"); }
SVC(0x6c) uint32_t sd_ble_gap_addr_set(const void *addr) { __asm volatile("svc #0x6c\n bx lr"); }
SVC(0x67) uint32_t sd_ble_opt_set(uint32_t id, const void *opt) { __asm volatile("svc #0x67\n bx lr"); }
SVC(0x72) uint32_t sd_ble_gap_adv_start(const void *params, uint8_t tag) { __asm volatile("svc #0x72\n bx lr"); }

NOINLINE uint32_t gatt_init(void)
{
    static const uint8_t uuid[4] = {0x09, 0x18, 0x01, 0x00};
    uint32_t err = sd_ble_gatts_service_add(1, uuid, &service_handle);
    if (err)
        return err;
    for (int i = 0; i < 3; i++) {
        attrs[i].uuid = (uint16_t)(0x2a1c + i);
        attrs[i].props = 0x12;
        err = sd_ble_gatts_characteristic_add(service_handle, &attrs[i], attrs[i].value, &attrs[i].handle);
        if (err)
            return err;
    }
    return 0;
}

NOINLINE uint32_t gap_init(void)
{
    static const uint8_t addr[7] = {0x01, 0xc0, 0xff, 0xee, 0x12, 0x34, 0x56};
    static const uint8_t passkey[] = "123456";
    static const uint8_t *const opt[1] = {passkey};
    uint32_t err = sd_ble_gap_addr_set(addr);
    if (!err)
        err = sd_ble_opt_set(34, opt);
    return err;
}

NOINLINE uint32_t adv_start(void)
{
    uint32_t params[4] = {0, 0, adv_interval, 0};
    return sd_ble_gap_adv_start(params, 1);
}

/* Event handling. */

NOINLINE void log_event(uint32_t e)
{
    event_log[log_pos++ & 31] = e;
}

NOINLINE void on_connect(uint32_t arg)
{
    state = 1;
    log_event(0x100 | arg);
}

NOINLINE void on_disconnect(uint32_t arg)
{
    state = 0;
    log_event(0x200 | arg);
    adv_start();
}

NOINLINE void on_write(uint32_t arg)
{
    uint16_t h = (uint16_t)arg;
    for (int i = 0; i < 8; i++) {
        if (attrs[i].handle == h) {
            attrs[i].len = (uint8_t)(arg >> 16);
            log_event(0x300 | (uint32_t)i);
            return;
        }
    }
}

NOINLINE void on_timeout(uint32_t arg)
{
    log_event(0x400 | arg);
    if (state == 2)
        state = 0;
}

NOINLINE void on_unknown(uint32_t arg)
{
    log_event(0xf00 | (arg & 0xff));
}

static const handler_t handlers[] = {on_connect, on_disconnect, on_write, on_timeout};

NOINLINE void dispatch_event(uint32_t id, uint32_t arg)
{
    if (id < sizeof handlers / sizeof handlers[0])
        handlers[id](arg);
    else
        on_unknown(arg);
}

NOINLINE const char *state_name(uint32_t s)
{
    switch (s) {
    case 0: return "idle";
    case 1: return "connected";
    case 2: return "bonding";
    case 3: return "bonded";
    case 4: return "updating";
    case 5: return "error";
    case 6: return "sleep";
    default: return "?";
    }
}

NOINLINE int command(const char *line)
{
    switch (line[0]) {
    case 'a':
        return (int)adv_start();
    case 'd':
        uart_put_hex(event_log[parse_hex(line + 1) & 31], 8);
        return 0;
    case 'h':
        uart_puts("a d h n r s t v");
        return 0;
    case 'n':
        strncpy((char *)device_name, line + 1, sizeof device_name - 1);
        return 0;
    case 'r':
        ring_init(&rx_ring);
        return 0;
    case 's':
        uart_puts(state_name(state));
        return 0;
    case 't':
        uart_put_dec(stats_mean(&temp_stats));
        return 0;
    case 'v':
        uart_puts("1.4.2");
        return 0;
    case 'x':
        to_upper((char *)scratch);
        return 0;
    case 'z':
        memset(scratch, 0, sizeof scratch);
        return 0;
    default:
        return -1;
    }
}

NOINLINE void read_line(char *out, size_t max)
{
    size_t n = 0;
    int c;
    while (n + 1 < max && (c = ring_get(&rx_ring)) >= 0 && c != '\n')
        out[n++] = (char)c;
    out[n] = 0;
}

NOINLINE void sample_sensor(void)
{
    static int32_t window[5];
    static uint8_t w;
    int32_t raw = (int32_t)(*TIMER_CC & 0xfff);
    window[w++ % 5] = scale_temp(raw);
    stats_add(&temp_stats, median5(window));
}

NOINLINE void app_error(uint32_t code)
{
    log_event(0xdead0000 | code);
    for (;;)
        ;
}

/* Interrupt handlers. */

void SysTick_Handler(void)
{
    tick_count++;
    if ((tick_count & 63) == 0)
        sample_sensor();
}

void UART0_IRQHandler(void)
{
    ring_put(&rx_ring, (uint8_t)*UART_RX);
}

void TIMER0_IRQHandler(void)
{
    dispatch_event(3, tick_count);
}

void RADIO_IRQHandler(void)
{
    uint32_t s = *RADIO_STATE;
    dispatch_event(s & 7, s >> 8);
}

NOINLINE void self_test(void)
{
    static const char *const names[] = {"alpha", "beta", "gamma"};
    uint8_t buf[24];
    fill_ramp(buf, 1, sizeof buf);
    xor_buf(buf, 0x5a, sizeof buf);
    reverse_bytes(buf, sizeof buf);
    memmove(buf + 1, buf, 8);
    if (checksum8(buf, sizeof buf) == 0)
        app_error(1);
    if (crc16_ccitt(buf, 8) == crc32(buf, 8))
        app_error(2);
    if (memcmp(buf, scratch, 4) == 0 && strcmp(names[0], names[1]) == 0)
        app_error(3);
    fill_words((uint32_t *)scratch, 0xa5a5a5a5, 8);
    fill_halfwords((uint16_t *)(scratch + 32), 0x1234, 8);
    bzero_even(scratch + 48, 0, 16);
    fill_until(scratch + 64, ' ', 16);
    if (popcount32(isqrt(adv_interval)) > 16)
        app_error(4);
    if (clamp((int32_t)strlen(names[2]), 0, 4) != 4)
        app_error(5);
}

int main(void)
{
    char line[32];
    ring_init(&rx_ring);
    ring_init(&tx_ring);
    stats_reset(&temp_stats);
    memset(attrs, 0, sizeof attrs);
    self_test();
    if (sd_ble_enable(0))
        app_error(6);
    uint32_t err = gatt_init();
    if (!err)
        err = gap_init();
    if (!err)
        err = adv_start();
    if (err)
        app_error(err);
    for (;;) {
        if (ring_count(&rx_ring)) {
            read_line(line, sizeof line);
            if (command(line) < 0)
                uart_puts("?\n");
        }
        __asm volatile("wfe");
    }
}
