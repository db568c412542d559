"""Compiled inner loop for the toy integrator.

The pair terms here mirror ``_PairPotential.terms`` in :mod:`.toy` line for
line; snapshot labels are always recomputed with the numpy version.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _pair_forces(pos, pi, pj, de, a, re, rep, s_on, s_off, forces):
    n_pairs = pi.shape[0]
    width = s_off - s_on
    forces[:, :] = 0.0
    energy = 0.0
    for p in range(n_pairs):
        i = pi[p]
        j = pj[p]
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        dz = pos[i, 2] - pos[j, 2]
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        if r >= s_off:
            continue
        ex = math.exp(-a[p] * (r - re[p]))
        phi = de[p] * (ex * ex - 2.0 * ex)
        dphi = 2.0 * a[p] * de[p] * (ex - ex * ex)
        if rep != 0.0:
            r12 = r ** -12
            phi += rep * r12
            dphi -= 12.0 * rep * r12 / r
        t = (r - s_on) / width
        if t < 0.0:
            t = 0.0
        s = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
        ds = -30.0 * t * t * (1.0 - t) * (1.0 - t) / width
        energy += phi * s
        g = -(dphi * s + phi * ds) / r
        forces[i, 0] += g * dx
        forces[i, 1] += g * dy
        forces[i, 2] += g * dz
        forces[j, 0] -= g * dx
        forces[j, 1] -= g * dy
        forces[j, 2] -= g * dz
    return energy


@njit(cache=True)
def integrate(pos, vel, accel, pi, pj, de, a, re, rep, s_on, s_off, dt, num_steps,
              record, blowup, rec_pos, rec_vel, total_energy, kinetic_w):
    """Velocity Verlet in place; returns ``False`` once any coordinate passes ``blowup``.

    ``accel[i]`` converts force on atom ``i`` into acceleration and
    ``kinetic_w[i]`` velocity squared into kinetic energy.  ``record`` holds
    the sorted steps whose positions and velocities are copied out, and
    ``total_energy`` receives kinetic plus potential energy at every step.
    """
    n = pos.shape[0]
    forces = np.empty_like(pos)
    e = _pair_forces(pos, pi, pj, de, a, re, rep, s_on, s_off, forces)
    k = 0
    nrec = record.shape[0]
    for step in range(num_steps + 1):
        if step > 0:
            for i in range(n):
                for c in range(3):
                    vel[i, c] += 0.5 * dt * accel[i] * forces[i, c]
                    pos[i, c] += dt * vel[i, c]
            e = _pair_forces(pos, pi, pj, de, a, re, rep, s_on, s_off, forces)
            for i in range(n):
                for c in range(3):
                    vel[i, c] += 0.5 * dt * accel[i] * forces[i, c]
                    if not abs(pos[i, c]) < blowup:
                        return False
        kin = 0.0
        for i in range(n):
            kin += kinetic_w[i] * (vel[i, 0] ** 2 + vel[i, 1] ** 2 + vel[i, 2] ** 2)
        total_energy[step] = e + kin
        while k < nrec and record[k] == step:
            rec_pos[k, :, :] = pos
            rec_vel[k, :, :] = vel
            k += 1
    return True
