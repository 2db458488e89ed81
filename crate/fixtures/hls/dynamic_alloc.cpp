#include <cstdint>

uint16_t Scale(uint16_t x) {
    uint16_t* buf = new uint16_t[4];
    buf[0] = x;
    uint16_t y = buf[0];
    delete[] buf;
    return y;
}
