/* Division helpers for cores without a divide instruction. */

#include <stdint.h>

uint32_t __aeabi_uidiv(uint32_t n, uint32_t d)
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
