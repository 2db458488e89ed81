#include <cstdint>

uint16_t Fold(uint16_t x, uint8_t n) {
    if (n == 0) {
        return x;
    }
    return Fold((uint16_t)(x ^ (x >> 1)), (uint8_t)(n - 1));
}
